//! Three browser demos over the core crate: metrics on pasted scores, ROI
//! statistics of a pasted curve, and attention reports from a small model
//! trained in the page. Each returns JSON text.

use coffee_core::explain::{attention_lift, explain};
use coffee_core::metrics::{best_fit_slope, curve_auc, normalized_entropy, roc_auc, EvalBatch, ScalingCurve};
use coffee_core::model::{ModelConfig, PerSource, SequenceModel};
use coffee_core::trainer::{prepare_histories, split_examples, train, TrainConfig};
use coffee_core::world::{generate_world, Dataset, WorldConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

pub fn metrics_json(predictions: &str, labels: &str) -> Result<String, String> {
    let batch = EvalBatch::new(parse_numbers(predictions)?, parse_numbers(labels)?).map_err(|e| e.to_string())?;
    let ne = normalized_entropy(&batch).map_err(|e| e.to_string())?;
    let auc = roc_auc(&batch).map_err(|e| e.to_string())?;
    Ok(json!({ "examples": batch.len(), "positives": batch.positives(), "ne": ne, "auc": auc }).to_string())
}

pub fn curve_json(xs: &str, ys: &str) -> Result<String, String> {
    let xs = parse_numbers(xs)?;
    let ys = parse_numbers(ys)?;
    if xs.len() != ys.len() {
        return Err(format!("{} x values but {} y values", xs.len(), ys.len()));
    }
    let curve = ScalingCurve::new("pasted", false, xs.into_iter().zip(ys).collect()).map_err(|e| e.to_string())?;
    let auc = curve_auc(&curve).map_err(|e| e.to_string())?;
    let slope = best_fit_slope(&curve).map_err(|e| e.to_string())?;
    Ok(json!({ "curve_auc": auc, "slope": slope }).to_string())
}

/// Generates a small world, trains for `steps` optimizer steps and explains
/// the first held-out request. Deterministic in its arguments.
pub fn attention_json(seed: u64, users: usize, steps: usize, top_m: usize) -> Result<String, String> {
    let world_cfg = WorldConfig {
        users: users.clamp(20, 400),
        contents: 300,
        ads: 80,
        authors: 30,
        codebook_size: 16,
        requests_per_user: 10,
        horizon_days: 20,
        warmup_days: 5,
        activity_rate: 10.0,
        ..WorldConfig::default()
    };
    let world = generate_world(&world_cfg, seed).map_err(|e| e.to_string())?;
    let data = Dataset::simulate(&world).map_err(|e| e.to_string())?;
    let mut model_cfg = ModelConfig::new(world.vocab());
    model_cfg.max_len = PerSource::splat(30);
    let train_cfg = TrainConfig {
        batch_size: 64,
        lr: 3e-3,
        epochs: 1000,
        max_steps: Some(steps.max(1)),
        snapshots: 1,
        seed,
        ..TrainConfig::default()
    };
    let run = train(&world, &data, &model_cfg, &train_cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let (_, eval_set) = split_examples(&data.examples, train_cfg.split, train_cfg.seed).map_err(|e| e.to_string())?;
    let histories = prepare_histories(&world, &data.histories, &model_cfg).map_err(|e| e.to_string())?;
    let first = eval_set.first().ok_or("no held-out requests")?;
    let report = explain(
        &run.model,
        &run.store,
        &world,
        &histories,
        first.user_id,
        first.ad_id,
        first.timestamp,
        top_m.max(1),
    )
    .map_err(|e| e.to_string())?;
    let pairs: Vec<(usize, usize, i64)> = eval_set.iter().map(|e| (e.user_id, e.ad_id, e.timestamp)).collect();
    let lift = attention_lift(&run.model, &run.store, &world, &histories, &pairs).ok();
    let (model0, store0) = SequenceModel::init(model_cfg, train_cfg.seed).map_err(|e| e.to_string())?;
    let untrained = attention_lift(&model0, &store0, &world, &histories, &pairs).ok();
    let last = run.record.final_snapshot();
    Ok(json!({
        "steps": last.step,
        "eval_ne": last.ne,
        "eval_auc": last.auc,
        "lift": lift.map(|l| l.lift),
        "untrained_lift": untrained.map(|l| l.lift),
        "report_text": report.to_text(),
        "report": report,
    })
    .to_string())
}

/// NE and ROC AUC of comma- or space-separated predictions and 0/1 labels.
#[wasm_bindgen]
pub fn metrics(predictions: &str, labels: &str) -> Result<String, JsValue> {
    metrics_json(predictions, labels).map_err(|e| JsValue::from_str(&e))
}

/// Curve AUC and least-squares slope of pasted (x, y) points.
#[wasm_bindgen]
pub fn curve(xs: &str, ys: &str) -> Result<String, JsValue> {
    curve_json(xs, ys).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn attention(seed: u32, users: u32, steps: u32, top_m: u32) -> Result<String, JsValue> {
    attention_json(u64::from(seed), users as usize, steps as usize, top_m as usize).map_err(|e| JsValue::from_str(&e))
}
