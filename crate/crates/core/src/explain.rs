//! Attention-based attribution: which history events a trained model looks at
//! when scoring an ad, and whether those events are topically related to it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::event::{AttributeValue, Event, SourceType};
use crate::model::{Candidate, SequenceModel};
use crate::numeric::{dot, ParamStore};
use crate::trainer::build_sequences;
use crate::world::{UserHistories, World};

pub const DEFAULT_TOP_M: usize = 5;
pub const MIN_LIFT_PAIRS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributedEvent {
    /// Position in the model's input sequence.
    pub position: usize,
    pub timestamp: i64,
    pub weight: f64,
    pub attributes: Vec<(String, String)>,
    /// Cosine between the event's item and the ad in topic-affinity space;
    /// `None` when the event carries no catalog item.
    pub affinity_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceAttribution {
    pub source: SourceType,
    pub sequence_len: usize,
    /// Sum of all attention weights of the source (1 unless the sequence is empty).
    pub total_weight: f64,
    /// Top events, sorted by descending weight.
    pub events: Vec<AttributedEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub user_id: usize,
    pub ad_id: usize,
    pub request_ts: i64,
    pub p_click: f64,
    pub sources: Vec<SourceAttribution>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let norm = (dot(a, a) * dot(b, b)).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        dot(a, b) / norm
    }
}

fn decode(model: &SequenceModel, event: &Event) -> Vec<(String, String)> {
    let schema = model.config().schema(event.source);
    schema
        .attributes
        .iter()
        .zip(&event.attributes)
        .map(|(spec, value)| {
            let shown = match value {
                AttributeValue::Categorical(id) => id.to_string(),
                AttributeValue::Dense(v) => format!("<{}-d vector>", v.len()),
            };
            (spec.name.clone(), shown)
        })
        .collect()
}

fn check_ids(world: &World, histories: &UserHistories, user: usize, ad: usize) -> Result<()> {
    if user >= world.users.len() || user >= histories.users() {
        return Err(CoffeeError::UnknownId(format!("user {user}")));
    }
    if ad >= world.ads.len() {
        return Err(CoffeeError::UnknownId(format!("ad {ad}")));
    }
    Ok(())
}

/// Per-source sequences, their attention weights and the ad probability for
/// one (user, ad, time) triple.
fn attend(
    model: &SequenceModel,
    store: &ParamStore,
    world: &World,
    histories: &UserHistories,
    user: usize,
    ad: usize,
    request_ts: i64,
) -> Result<(f64, Vec<(SourceType, Vec<Event>, Vec<f64>)>)> {
    check_ids(world, histories, user, ad)?;
    let sequences = build_sequences(histories, model.config(), user, request_ts);
    let candidate = Candidate {
        ad_id: ad,
        content_embedding: &world.ads[ad].content_embedding,
    };
    let pred = model.forward(store, &sequences, candidate, request_ts)?;
    let per_source = sequences
        .into_iter()
        .map(|seq| {
            let weights = pred.weights(seq.source).map(<[f64]>::to_vec).unwrap_or_default();
            (seq.source, seq.events, weights)
        })
        .collect();
    Ok((pred.p_click, per_source))
}

/// Runs the model on one (user, ad) pair and keeps the `top_m` most attended
/// events of every enabled source. The weights are the forward pass's own.
#[allow(clippy::too_many_arguments)]
pub fn explain(
    model: &SequenceModel,
    store: &ParamStore,
    world: &World,
    histories: &UserHistories,
    user: usize,
    ad: usize,
    request_ts: i64,
    top_m: usize,
) -> Result<AttributionReport> {
    let (p_click, per_source) = attend(model, store, world, histories, user, ad, request_ts)?;
    let ad_affinity = &world.ads[ad].topic_affinity;
    let sources = per_source
        .into_iter()
        .map(|(source, events, weights)| {
            let mut order: Vec<usize> = (0..events.len()).collect();
            order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
            SourceAttribution {
                source,
                sequence_len: events.len(),
                total_weight: weights.iter().sum(),
                events: order
                    .into_iter()
                    .take(top_m)
                    .map(|i| AttributedEvent {
                        position: i,
                        timestamp: events[i].timestamp,
                        weight: weights[i],
                        attributes: decode(model, &events[i]),
                        affinity_cosine: world.item_affinity(&events[i]).map(|a| cosine(a, ad_affinity)),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(AttributionReport {
        user_id: user,
        ad_id: ad,
        request_ts,
        p_click,
        sources,
    })
}

impl AttributionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "user {}  ad {}  request_ts {}  p_click {:.4}", self.user_id, self.ad_id, self.request_ts, self.p_click)
            .expect("string write");
        for s in &self.sources {
            writeln!(w).expect("string write");
            writeln!(w, "{} ({} events)", s.source, s.sequence_len).expect("string write");
            if s.events.is_empty() {
                writeln!(w, "  (no events)").expect("string write");
                continue;
            }
            writeln!(w, "  {:>4} {:>8} {:>8} {:>12}  attributes", "rank", "weight", "cosine", "timestamp").expect("string write");
            for (rank, e) in s.events.iter().enumerate() {
                let cos = e.affinity_cosine.map(|c| format!("{c:+.4}")).unwrap_or_else(|| "-".into());
                let attrs: Vec<String> = e.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(
                    w,
                    "  {:>4} {:>8.4} {:>8} {:>12}  {}",
                    rank + 1,
                    e.weight,
                    cos,
                    e.timestamp,
                    attrs.join(" ")
                )
                .expect("string write");
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub lift: f64,
    /// Mean cosine of the most attended event to the ad.
    pub top1_cosine: f64,
    /// Mean cosine of a uniformly drawn history event to the ad.
    pub random_cosine: f64,
    /// (pair, source) sequences that entered the means.
    pub sequences: usize,
    pub pairs: usize,
    /// The same ratio restricted to each source.
    pub per_source: Vec<(SourceType, f64)>,
}

/// Pooled over every non-empty (pair, source) sequence. The random baseline
/// is the exact expectation over a uniform draw from the sequence, and ties
/// for the top weight are split evenly, so a model with uniform attention
/// scores exactly 1.
pub fn attention_lift(
    model: &SequenceModel,
    store: &ParamStore,
    world: &World,
    histories: &UserHistories,
    pairs: &[(usize, usize, i64)],
) -> Result<LiftReport> {
    if pairs.len() < MIN_LIFT_PAIRS {
        return Err(CoffeeError::InsufficientData(format!(
            "attention lift needs at least {MIN_LIFT_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    let mut top_sum = 0.0;
    let mut random_sum = 0.0;
    let mut sequences = 0usize;
    let mut by_source = [(0.0, 0.0); 3];
    for &(user, ad, ts) in pairs {
        let (_, per_source) = attend(model, store, world, histories, user, ad, ts)?;
        let ad_affinity = &world.ads[ad].topic_affinity;
        for (source, events, weights) in per_source {
            let cos: Vec<f64> = events
                .iter()
                .filter_map(|e| world.item_affinity(e).map(|a| cosine(a, ad_affinity)))
                .collect();
            if cos.is_empty() || cos.len() != weights.len() {
                continue;
            }
            let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<f64> = cos.iter().zip(&weights).filter(|(_, &w)| w == max).map(|(c, _)| *c).collect();
            let top = tied.iter().sum::<f64>() / tied.len() as f64;
            let random = cos.iter().sum::<f64>() / cos.len() as f64;
            top_sum += top;
            random_sum += random;
            by_source[source.index()].0 += top;
            by_source[source.index()].1 += random;
            sequences += 1;
        }
    }
    if sequences == 0 || random_sum == 0.0 {
        return Err(CoffeeError::InsufficientData("no pair has a scorable history".into()));
    }
    let n = sequences as f64;
    Ok(LiftReport {
        lift: top_sum / random_sum,
        top1_cosine: top_sum / n,
        random_cosine: random_sum / n,
        sequences,
        pairs: pairs.len(),
        per_source: SourceType::ALL
            .into_iter()
            .filter(|s| by_source[s.index()].1 != 0.0)
            .map(|s| (s, by_source[s.index()].0 / by_source[s.index()].1))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::trainer::prepare_histories;
    use crate::world::{generate_world, Dataset, WorldConfig};

    fn small() -> (World, Dataset) {
        let cfg = WorldConfig {
            users: 30,
            contents: 80,
            ads: 20,
            authors: 8,
            requests_per_user: 5,
            horizon_days: 10,
            activity_rate: 8.0,
            codebook_size: 8,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg, 9).unwrap();
        let data = Dataset::simulate(&world).unwrap();
        (world, data)
    }

    fn zeroed(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn report_weights_sum_to_one_and_are_sorted() {
        let (world, data) = small();
        let cfg = ModelConfig::new(world.vocab());
        let (model, store) = SequenceModel::init(cfg.clone(), 1).unwrap();
        let histories = prepare_histories(&world, &data.histories, &cfg).unwrap();
        let ex = data.examples[7];
        let report = explain(&model, &store, &world, &histories, ex.user_id, ex.ad_id, ex.timestamp, 500).unwrap();
        assert_eq!(report.sources.len(), 3);
        for s in &report.sources {
            if s.sequence_len > 0 {
                assert!((s.total_weight - 1.0).abs() < 1e-9);
                let listed: f64 = s.events.iter().map(|e| e.weight).sum();
                assert!((listed - 1.0).abs() < 1e-9);
            }
            assert!(s.events.windows(2).all(|w| w[0].weight >= w[1].weight));
        }
        let pred_weights = {
            let seqs = build_sequences(&histories, &cfg, ex.user_id, ex.timestamp);
            let cand = Candidate {
                ad_id: ex.ad_id,
                content_embedding: &world.ads[ex.ad_id].content_embedding,
            };
            model.forward(&store, &seqs, cand, ex.timestamp).unwrap()
        };
        for s in &report.sources {
            let w = pred_weights.weights(s.source).unwrap();
            for e in &s.events {
                assert_eq!(e.weight, w[e.position]);
            }
        }
        let short = explain(&model, &store, &world, &histories, ex.user_id, ex.ad_id, ex.timestamp, DEFAULT_TOP_M).unwrap();
        assert!(short.sources.iter().all(|s| s.events.len() <= DEFAULT_TOP_M));
        assert!(short.to_text().contains("p_click"));
    }

    #[test]
    fn single_event_history_reported_with_full_weight() {
        let (world, data) = small();
        let cfg = ModelConfig::new(world.vocab());
        let (model, store) = SequenceModel::init(cfg.clone(), 2).unwrap();
        let user = data.examples[0].user_id;
        let first = data.histories.get(user, SourceType::AdImpression)[0].clone();
        let only = UserHistories::new(std::slice::from_ref(&first), world.users.len()).unwrap();
        let report = explain(&model, &store, &world, &only, user, 3, first.timestamp + 60, 5).unwrap();
        let ad = report.sources.iter().find(|s| s.source == SourceType::AdImpression).unwrap();
        assert_eq!(ad.events.len(), 1);
        assert_eq!(ad.events[0].weight, 1.0);
        let organic = report.sources.iter().find(|s| s.source == SourceType::OrganicImpression).unwrap();
        assert!(organic.events.is_empty());
    }

    #[test]
    fn empty_history_gives_empty_report() {
        let (world, _) = small();
        let cfg = ModelConfig::new(world.vocab());
        let (model, store) = SequenceModel::init(cfg, 2).unwrap();
        let empty = UserHistories::new(&[], world.users.len()).unwrap();
        let report = explain(&model, &store, &world, &empty, 0, 0, 1_000_000_000, 5).unwrap();
        assert!(report.sources.iter().all(|s| s.events.is_empty()));
        assert!(explain(&model, &store, &world, &empty, 10_000, 0, 0, 5).is_err());
    }

    #[test]
    fn uniform_attention_has_unit_lift() {
        let (world, data) = small();
        let cfg = ModelConfig::new(world.vocab());
        let (model, mut store) = SequenceModel::init(cfg.clone(), 3).unwrap();
        zeroed(&mut store);
        let histories = prepare_histories(&world, &data.histories, &cfg).unwrap();
        let pairs: Vec<(usize, usize, i64)> = data.examples.iter().take(120).map(|e| (e.user_id, e.ad_id, e.timestamp)).collect();
        let lift = attention_lift(&model, &store, &world, &histories, &pairs).unwrap();
        assert!((lift.lift - 1.0).abs() < 1e-12, "{}", lift.lift);
        assert!(attention_lift(&model, &store, &world, &histories, &pairs[..50]).is_err());
    }

    #[test]
    fn identical_events_have_unit_lift() {
        let (world, data) = small();
        let cfg = ModelConfig::new(world.vocab());
        let (model, store) = SequenceModel::init(cfg, 4).unwrap();
        // every user sees the same ad every hour
        let template = data.histories.get(0, SourceType::AdImpression)[0].clone();
        let events: Vec<Event> = (0..world.users.len())
            .flat_map(|u| {
                let t = template.clone();
                (0..20).map(move |h| Event {
                    user_id: u,
                    timestamp: t.timestamp + 3_600 * h,
                    ..t.clone()
                })
            })
            .collect();
        let histories = UserHistories::new(&events, world.users.len()).unwrap();
        let ts = template.timestamp + 3_600 * 30;
        let pairs: Vec<(usize, usize, i64)> = (0..120).map(|i| (i % world.users.len(), i % world.ads.len(), ts)).collect();
        let lift = attention_lift(&model, &store, &world, &histories, &pairs).unwrap();
        assert!((lift.lift - 1.0).abs() < 1e-12);
    }
}
