//! The sequence-learning recommendation model.
//!
//! Each event is turned into a representation by embedding its attributes,
//! concatenating them, linearly compressing to `event_dim`, appending a
//! sinusoidal encoding of its age relative to the request, and projecting
//! back to `event_dim`. The candidate ad's embedding queries each enabled
//! source's sequence through single-head cross-attention; the per-source
//! contexts, their element-wise products with the ad embedding, and the ad
//! embedding itself feed an MLP that outputs the click logit.
//!
//! Work is organised per user: every request of one user shares that user's
//! history, so the attribute part of each event representation is computed
//! once per group and its gradient is accumulated across the group's
//! requests before being pushed into the embedding tables.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::event::{
    AttrKind, AttributeValue, EbfSequence, Event, SourceSchema, SourceType, Vocab, MAX_ATTRIBUTES,
};
use crate::numeric::{
    affine_backward_accumulate, affine_into, dot, normal_init, sigmoid_bce, softmax_in_place,
    xavier_uniform, GradBuffer, Matrix, ParamId, ParamStore,
};
use crate::rng::{digest_bytes, substream};

/// Shortest and longest timescales of the recency encoding, in seconds.
const MIN_PERIOD_SECS: f64 = 3_600.0;
const MAX_PERIOD_SECS: f64 = 90.0 * 86_400.0;

/// Upper bound on online sequence lengths.
pub const MAX_ONLINE_LEN: usize = 10_000;

const EMBED_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerSource<T> {
    pub organic_impression: T,
    pub ad_impression: T,
    pub video_view: T,
}

impl<T: Copy> PerSource<T> {
    pub fn splat(value: T) -> Self {
        PerSource {
            organic_impression: value,
            ad_impression: value,
            video_view: value,
        }
    }

    pub fn get(&self, source: SourceType) -> T {
        match source {
            SourceType::OrganicImpression => self.organic_impression,
            SourceType::AdImpression => self.ad_impression,
            SourceType::VideoView => self.video_view,
        }
    }

    pub fn set(&mut self, source: SourceType, value: T) {
        match source {
            SourceType::OrganicImpression => self.organic_impression = value,
            SourceType::AdImpression => self.ad_impression = value,
            SourceType::VideoView => self.video_view = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sources whose sequences the model consumes. Empty means ad-only.
    pub sources: Vec<SourceType>,
    pub max_len: PerSource<usize>,
    pub attr_dim: usize,
    pub event_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub hidden: Vec<usize>,
    /// Ad impressions carry the appended k-NN embedding attribute.
    pub enrichment: bool,
    /// Neighbours averaged into the enrichment attribute.
    pub enrichment_k: usize,
    /// Aggregation window for histories, in days before the request.
    pub window_days: u32,
    pub vocab: Vocab,
}

impl ModelConfig {
    pub fn new(vocab: Vocab) -> Self {
        ModelConfig {
            sources: SourceType::ALL.to_vec(),
            max_len: PerSource::splat(100),
            attr_dim: 8,
            event_dim: 16,
            time_dim: 8,
            attn_dim: 16,
            hidden: vec![32, 16],
            enrichment: false,
            enrichment_k: crate::enrichment::DEFAULT_K,
            window_days: 30,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("attr_dim", self.attr_dim),
            ("event_dim", self.event_dim),
            ("attn_dim", self.attn_dim),
            ("window_days", self.window_days as usize),
            ("enrichment_k", self.enrichment_k),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CoffeeError::Config(format!("`{name}` must be >= 1")));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(CoffeeError::Config("`time_dim` must be a positive even number".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(CoffeeError::Config("hidden widths must be >= 1".into()));
        }
        for s in SourceType::ALL {
            let r = self.max_len.get(s);
            if r == 0 || r > MAX_ONLINE_LEN {
                return Err(CoffeeError::Config(format!(
                    "max_len for {s} is {r}; online lengths must lie in 1..={MAX_ONLINE_LEN}"
                )));
            }
        }
        let mut seen = self.sources.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.sources.len() {
            return Err(CoffeeError::Config("duplicate source in `sources`".into()));
        }
        Ok(())
    }

    pub fn is_enabled(&self, source: SourceType) -> bool {
        self.sources.contains(&source)
    }

    /// Enabled sources in canonical order.
    pub fn enabled(&self) -> Vec<SourceType> {
        SourceType::ALL
            .into_iter()
            .filter(|s| self.is_enabled(*s))
            .collect()
    }

    pub fn schema(&self, source: SourceType) -> SourceSchema {
        if self.enrichment && source == SourceType::AdImpression {
            SourceSchema::enriched(source, &self.vocab)
        } else {
            SourceSchema::new(source, &self.vocab)
        }
    }

    pub fn head_input_dim(&self) -> usize {
        self.event_dim * (1 + 2 * self.sources.len())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| CoffeeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        digest_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Geometric timescales from one hour to 90 days, `time_dim / 2` of them.
fn periods(time_dim: usize) -> Vec<f64> {
    let m = time_dim / 2;
    if m == 1 {
        return vec![MIN_PERIOD_SECS];
    }
    let ratio = MAX_PERIOD_SECS / MIN_PERIOD_SECS;
    (0..m)
        .map(|j| MIN_PERIOD_SECS * ratio.powf(j as f64 / (m - 1) as f64))
        .collect()
}

fn encode_delta_into(delta: f64, periods: &[f64], out: &mut [f64]) {
    for (j, w) in periods.iter().enumerate() {
        let (s, c) = (delta / w).sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = c;
    }
}

/// Sinusoidal encoding of an event's age at request time:
/// `[sin(Δ/ω₀), cos(Δ/ω₀), sin(Δ/ω₁), …]`.
pub fn encode_timestamp(event_ts: i64, request_ts: i64, time_dim: usize) -> Result<Vec<f64>> {
    if event_ts > request_ts {
        return Err(CoffeeError::Causality {
            event_ts,
            request_ts,
        });
    }
    let mut out = vec![0.0; time_dim];
    encode_delta_into((request_ts - event_ts) as f64, &periods(time_dim), &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
enum AttrParams {
    Table(ParamId),
    Dense { w: ParamId, b: ParamId },
}

#[derive(Clone, Debug)]
struct SourceParams {
    attrs: Vec<AttrParams>,
    compress_w: ParamId,
    compress_b: ParamId,
    project_w: ParamId,
    project_b: ParamId,
    key_w: ParamId,
    query_w: ParamId,
    null: ParamId,
}

#[derive(Clone, Debug)]
pub struct SequenceModel {
    config: ModelConfig,
    schemas: [SourceSchema; 3],
    sources: [SourceParams; 3],
    ad_table: ParamId,
    ad_dense_w: ParamId,
    ad_dense_b: ParamId,
    /// Maps the ad-impression source's ad-id embedding into the candidate
    /// embedding, so candidate and history ads share one id table.
    ad_shared_w: ParamId,
    ad_id_table: ParamId,
    head: Vec<(ParamId, ParamId)>,
    periods: Vec<f64>,
}

/// The ad being scored.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub ad_id: usize,
    pub content_embedding: &'a [f64],
}

/// One request within a user group: which slice of each source's history it
/// sees (indices into the group's most-recent-first event lists).
#[derive(Clone, Debug)]
pub struct GroupQuery<'a> {
    pub candidate: Candidate<'a>,
    pub request_ts: i64,
    pub ranges: [Range<usize>; 3],
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_click: f64,
    pub logit: f64,
    /// Attention weights per source, aligned with the input sequence order.
    /// `None` for disabled sources; empty for empty sequences.
    pub attention: [Option<Vec<f64>>; 3],
    /// Sources supplied to `forward` that the config does not enable.
    pub ignored_sources: Vec<SourceType>,
}

impl Prediction {
    pub fn weights(&self, source: SourceType) -> Option<&[f64]> {
        self.attention[source.index()].as_deref()
    }
}

/// Cached attribute-side computations for one event of a group.
struct StaticEvent {
    concat: Vec<f64>,
    compressed: Vec<f64>,
    /// compressed · project_w[top rows]
    projected: Vec<f64>,
    grad: Vec<f64>,
    used: bool,
}

/// Per-query attention state kept for the backward pass.
struct AttnState {
    /// query / √d_k
    qs: Vec<f64>,
    /// key_w · qs
    kq: Vec<f64>,
    /// time encodings, row-major `r × d_t`
    times: Vec<f64>,
    weights: Vec<f64>,
    /// attention-weighted mean of the time encodings
    tbar: Vec<f64>,
    context: Vec<f64>,
}

impl SequenceModel {
    /// Builds the parameter layout and initialises it from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(SequenceModel, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "model-init");
        let d_a = config.attr_dim;
        let d_e = config.event_dim;
        let d_t = config.time_dim;
        let d_k = config.attn_dim;
        let schemas = SourceType::ALL.map(|s| config.schema(s));
        for schema in &schemas {
            let s = schema.source.tag();
            for spec in &schema.attributes {
                match spec.kind {
                    AttrKind::Categorical { cardinality } => {
                        store.add(
                            format!("{s}.attr.{}.table", spec.name),
                            normal_init(cardinality, d_a, EMBED_INIT_STD, &mut rng),
                        );
                    }
                    AttrKind::Dense { dim } => {
                        store.add(format!("{s}.attr.{}.w", spec.name), xavier_uniform(dim, d_a, &mut rng));
                        store.add(format!("{s}.attr.{}.b", spec.name), Matrix::zeros(1, d_a));
                    }
                }
            }
            let k = schema.len();
            store.add(format!("{s}.compress.w"), xavier_uniform(k * d_a, d_e, &mut rng));
            store.add(format!("{s}.compress.b"), Matrix::zeros(1, d_e));
            store.add(format!("{s}.project.w"), xavier_uniform(d_e + d_t, d_e, &mut rng));
            store.add(format!("{s}.project.b"), Matrix::zeros(1, d_e));
            store.add(format!("{s}.key.w"), xavier_uniform(d_e, d_k, &mut rng));
            store.add(format!("{s}.query.w"), xavier_uniform(d_e, d_k, &mut rng));
            store.add(format!("{s}.null"), Matrix::zeros(1, d_e));
        }
        store.add("ad.table", normal_init(config.vocab.ads, d_e, EMBED_INIT_STD, &mut rng));
        store.add(
            "ad.dense.w",
            xavier_uniform(config.vocab.embedding_dim, d_e, &mut rng),
        );
        store.add("ad.dense.b", Matrix::zeros(1, d_e));
        store.add("ad.shared_id.w", xavier_uniform(d_a, d_e, &mut rng));
        let mut fan_in = config.head_input_dim();
        for (i, &h) in config.hidden.iter().enumerate() {
            store.add(format!("head.{i}.w"), xavier_uniform(fan_in, h, &mut rng));
            store.add(format!("head.{i}.b"), Matrix::zeros(1, h));
            fan_in = h;
        }
        store.add("head.out.w", xavier_uniform(fan_in, 1, &mut rng));
        store.add("head.out.b", Matrix::zeros(1, 1));
        let model = SequenceModel::bind(config, &store)?;
        Ok((model, store))
    }

    /// Resolves parameter handles in an existing store (e.g. a loaded
    /// checkpoint), checking every shape against `config`.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<SequenceModel> {
        config.validate()?;
        let lookup = |name: String, rows: usize, cols: usize| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| CoffeeError::Format(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(CoffeeError::Format(format!(
                    "parameter `{name}` has shape {:?}, expected ({rows}, {cols})",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let d_a = config.attr_dim;
        let d_e = config.event_dim;
        let d_t = config.time_dim;
        let d_k = config.attn_dim;
        let schemas = SourceType::ALL.map(|s| config.schema(s));
        let mut sources = Vec::with_capacity(3);
        for schema in &schemas {
            let s = schema.source.tag();
            let mut attrs = Vec::with_capacity(schema.len());
            for spec in &schema.attributes {
                attrs.push(match spec.kind {
                    AttrKind::Categorical { cardinality } => {
                        AttrParams::Table(lookup(format!("{s}.attr.{}.table", spec.name), cardinality, d_a)?)
                    }
                    AttrKind::Dense { dim } => AttrParams::Dense {
                        w: lookup(format!("{s}.attr.{}.w", spec.name), dim, d_a)?,
                        b: lookup(format!("{s}.attr.{}.b", spec.name), 1, d_a)?,
                    },
                });
            }
            sources.push(SourceParams {
                attrs,
                compress_w: lookup(format!("{s}.compress.w"), schema.len() * d_a, d_e)?,
                compress_b: lookup(format!("{s}.compress.b"), 1, d_e)?,
                project_w: lookup(format!("{s}.project.w"), d_e + d_t, d_e)?,
                project_b: lookup(format!("{s}.project.b"), 1, d_e)?,
                key_w: lookup(format!("{s}.key.w"), d_e, d_k)?,
                query_w: lookup(format!("{s}.query.w"), d_e, d_k)?,
                null: lookup(format!("{s}.null"), 1, d_e)?,
            });
        }
        let mut head = Vec::new();
        let mut fan_in = config.head_input_dim();
        for (i, &h) in config.hidden.iter().enumerate() {
            head.push((
                lookup(format!("head.{i}.w"), fan_in, h)?,
                lookup(format!("head.{i}.b"), 1, h)?,
            ));
            fan_in = h;
        }
        head.push((lookup("head.out.w".into(), fan_in, 1)?, lookup("head.out.b".into(), 1, 1)?));
        let sources: [SourceParams; 3] = sources.try_into().expect("three sources");
        let ad_source = SourceType::AdImpression;
        let AttrParams::Table(ad_id_table) = sources[ad_source.index()].attrs[ad_source.item_attribute()] else {
            return Err(CoffeeError::Format("ad impression item attribute is not categorical".into()));
        };
        Ok(SequenceModel {
            ad_shared_w: lookup("ad.shared_id.w".into(), d_a, d_e)?,
            ad_id_table,
            periods: periods(config.time_dim),
            ad_table: lookup("ad.table".into(), config.vocab.ads, d_e)?,
            ad_dense_w: lookup("ad.dense.w".into(), config.vocab.embedding_dim, d_e)?,
            ad_dense_b: lookup("ad.dense.b".into(), 1, d_e)?,
            head,
            schemas,
            sources,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Handle of the output-layer bias, which trainers set to the prior logit.
    pub fn output_bias(&self) -> ParamId {
        self.head.last().expect("output layer").1
    }

    /// Parameter handles owned by one source's event module and attention.
    pub fn source_param_ids(&self, source: SourceType) -> Vec<ParamId> {
        let sp = &self.sources[source.index()];
        let mut ids: Vec<ParamId> = sp
            .attrs
            .iter()
            .flat_map(|a| match *a {
                AttrParams::Table(t) => vec![t],
                AttrParams::Dense { w, b } => vec![w, b],
            })
            .collect();
        ids.extend([
            sp.compress_w,
            sp.compress_b,
            sp.project_w,
            sp.project_b,
            sp.key_w,
            sp.query_w,
            sp.null,
        ]);
        ids
    }

    fn check_attributes(&self, event: &Event) -> Result<()> {
        let schema = &self.schemas[event.source.index()];
        if event.attributes.len() != schema.len() || event.attributes.len() > MAX_ATTRIBUTES {
            return Err(CoffeeError::Schema(format!(
                "{} event has {} attributes, model expects {}",
                event.source,
                event.attributes.len(),
                schema.len()
            )));
        }
        Ok(())
    }

    /// Attribute embeddings, concatenated and compressed; then the top block
    /// of the projection applied.
    fn static_forward(&self, store: &ParamStore, event: &Event) -> Result<StaticEvent> {
        self.check_attributes(event)?;
        let d_a = self.config.attr_dim;
        let d_e = self.config.event_dim;
        let sp = &self.sources[event.source.index()];
        let mut concat = vec![0.0; event.attributes.len() * d_a];
        for (j, (value, params)) in event.attributes.iter().zip(&sp.attrs).enumerate() {
            let slot = &mut concat[j * d_a..(j + 1) * d_a];
            match (value, params) {
                (AttributeValue::Categorical(id), AttrParams::Table(t)) => {
                    let table = store.value(*t);
                    if *id >= table.rows() {
                        return Err(CoffeeError::OutOfRange {
                            id: *id,
                            size: table.rows(),
                        });
                    }
                    slot.copy_from_slice(table.row(*id));
                }
                (AttributeValue::Dense(v), AttrParams::Dense { w, b }) => {
                    let w = store.value(*w);
                    if v.len() != w.rows() {
                        return Err(CoffeeError::Dimension(format!(
                            "dense attribute has dim {}, expected {}",
                            v.len(),
                            w.rows()
                        )));
                    }
                    affine_into(v, w, Some(store.value(*b).data()), slot);
                }
                _ => {
                    return Err(CoffeeError::Schema(format!(
                        "attribute {j} of {} event has the wrong kind",
                        event.source
                    )))
                }
            }
        }
        let mut compressed = vec![0.0; d_e];
        affine_into(
            &concat,
            store.value(sp.compress_w),
            Some(store.value(sp.compress_b).data()),
            &mut compressed,
        );
        let project = store.value(sp.project_w);
        let mut projected = vec![0.0; d_e];
        for (hi, wrow) in compressed.iter().zip(project.data().chunks_exact(d_e)) {
            for (o, w) in projected.iter_mut().zip(wrow) {
                *o += hi * w;
            }
        }
        Ok(StaticEvent {
            concat,
            compressed,
            projected,
            grad: vec![0.0; d_e],
            used: false,
        })
    }

    /// Pushes an accumulated representation gradient back through the
    /// projection, compression and attribute embeddings.
    fn static_backward(&self, store: &ParamStore, grads: &mut GradBuffer, event: &Event, cached: &StaticEvent) {
        let d_a = self.config.attr_dim;
        let d_e = self.config.event_dim;
        let sp = &self.sources[event.source.index()];
        // top block of project_w: rows 0..d_e
        let mut dcompressed = vec![0.0; d_e];
        {
            let (project, grad) = (store.value(sp.project_w), grads.get_mut(sp.project_w));
            for i in 0..d_e {
                let wrow = &project.data()[i * d_e..(i + 1) * d_e];
                dcompressed[i] = wrow.iter().zip(&cached.grad).map(|(a, b)| a * b).sum();
                let hi = cached.compressed[i];
                for (g, d) in grad.data_mut()[i * d_e..(i + 1) * d_e].iter_mut().zip(&cached.grad) {
                    *g += hi * d;
                }
            }
        }
        let mut dconcat = vec![0.0; cached.concat.len()];
        {
            let (w, dw) = (store.value(sp.compress_w), grads.get_mut(sp.compress_w));
            affine_backward_accumulate(&cached.concat, w, &dcompressed, Some(&mut dconcat), dw, None);
        }
        for (g, d) in grads.get_mut(sp.compress_b).data_mut().iter_mut().zip(&dcompressed) {
            *g += d;
        }
        for (j, (value, params)) in event.attributes.iter().zip(&sp.attrs).enumerate() {
            let up = &dconcat[j * d_a..(j + 1) * d_a];
            match (value, params) {
                (AttributeValue::Categorical(id), AttrParams::Table(t)) => {
                    for (g, u) in grads.get_mut(*t).row_mut(*id).iter_mut().zip(up) {
                        *g += u;
                    }
                }
                (AttributeValue::Dense(v), AttrParams::Dense { w, b }) => {
                    let (wv, dw) = (store.value(*w), grads.get_mut(*w));
                    affine_backward_accumulate(v, wv, up, None, dw, None);
                    for (g, u) in grads.get_mut(*b).data_mut().iter_mut().zip(up) {
                        *g += u;
                    }
                }
                _ => unreachable!("checked in static_forward"),
            }
        }
    }

    /// Final representation of a single event at `request_ts`.
    pub fn event_representation(&self, store: &ParamStore, event: &Event, request_ts: i64) -> Result<Vec<f64>> {
        let cached = self.static_forward(store, event)?;
        let mut rep = vec![0.0; self.config.event_dim];
        self.finish_representation(store, event, &cached, request_ts, &mut rep)?;
        Ok(rep)
    }

    /// `rep = projected + time_encoding · project_w[bottom rows] + project_b`;
    /// also returns the time encoding in `time_buf` for the backward pass.
    fn finish_representation_with(
        &self,
        store: &ParamStore,
        event: &Event,
        cached: &StaticEvent,
        request_ts: i64,
        rep: &mut [f64],
        time_buf: &mut [f64],
    ) -> Result<()> {
        if event.timestamp > request_ts {
            return Err(CoffeeError::Causality {
                event_ts: event.timestamp,
                request_ts,
            });
        }
        let d_e = self.config.event_dim;
        let sp = &self.sources[event.source.index()];
        encode_delta_into((request_ts - event.timestamp) as f64, &self.periods, time_buf);
        rep.copy_from_slice(store.value(sp.project_b).data());
        for (r, p) in rep.iter_mut().zip(&cached.projected) {
            *r += p;
        }
        let project = store.value(sp.project_w);
        for (t, wrow) in time_buf
            .iter()
            .zip(project.data()[d_e * d_e..].chunks_exact(d_e))
        {
            for (r, w) in rep.iter_mut().zip(wrow) {
                *r += t * w;
            }
        }
        Ok(())
    }

    fn finish_representation(
        &self,
        store: &ParamStore,
        event: &Event,
        cached: &StaticEvent,
        request_ts: i64,
        rep: &mut [f64],
    ) -> Result<()> {
        let mut time_buf = vec![0.0; self.config.time_dim];
        self.finish_representation_with(store, event, cached, request_ts, rep, &mut time_buf)
    }

    fn ad_embedding(&self, store: &ParamStore, candidate: &Candidate<'_>) -> Result<Vec<f64>> {
        let table = store.value(self.ad_table);
        if candidate.ad_id >= table.rows() {
            return Err(CoffeeError::OutOfRange {
                id: candidate.ad_id,
                size: table.rows(),
            });
        }
        let w = store.value(self.ad_dense_w);
        if candidate.content_embedding.len() != w.rows() {
            return Err(CoffeeError::Dimension(format!(
                "candidate embedding has dim {}, expected {}",
                candidate.content_embedding.len(),
                w.rows()
            )));
        }
        let mut a = vec![0.0; self.config.event_dim];
        affine_into(
            candidate.content_embedding,
            w,
            Some(store.value(self.ad_dense_b).data()),
            &mut a,
        );
        for (x, t) in a.iter_mut().zip(table.row(candidate.ad_id)) {
            *x += t;
        }
        let shared = store.value(self.ad_id_table);
        if candidate.ad_id >= shared.rows() {
            return Err(CoffeeError::OutOfRange {
                id: candidate.ad_id,
                size: shared.rows(),
            });
        }
        let mut via_id = vec![0.0; self.config.event_dim];
        affine_into(shared.row(candidate.ad_id), store.value(self.ad_shared_w), None, &mut via_id);
        for (x, v) in a.iter_mut().zip(&via_id) {
            *x += v;
        }
        Ok(a)
    }

    /// Scores every query of one user and returns the predictions with the
    /// summed log loss. With `grads = Some((buffer, s))`, also accumulates
    /// `s · ∂loss/∂θ` into `buffer`.
    ///
    /// Keys and values are affine in each event's projected attributes and
    /// its time encoding, so the attention is evaluated from per-event cached
    /// products and a few per-query vectors rather than materialised key and
    /// value matrices. Time encodings come from cached phases relative to the
    /// latest request of the group via angle addition.
    pub fn run_group(
        &self,
        store: &ParamStore,
        history: [&[Event]; 3],
        queries: &[GroupQuery<'_>],
        mut grads: Option<(&mut GradBuffer, f64)>,
    ) -> Result<(Vec<Prediction>, f64)> {
        let d_e = self.config.event_dim;
        let d_t = self.config.time_dim;
        let d_k = self.config.attn_dim;
        let half = d_t / 2;
        let inv_sqrt = 1.0 / (d_k as f64).sqrt();
        let enabled = self.config.enabled();
        let t_ref = queries.iter().map(|q| q.request_ts).max().unwrap_or(0);

        // attribute-side work and time phases, once per event of the group
        let mut statics: [Vec<StaticEvent>; 3] = Default::default();
        let mut phases: [Vec<f64>; 3] = Default::default();
        let mut offsets = [0usize; 3];
        for &s in &enabled {
            let si = s.index();
            let lo = queries.iter().map(|q| q.ranges[si].start).min().unwrap_or(0);
            let hi = queries.iter().map(|q| q.ranges[si].end).max().unwrap_or(0);
            if hi > history[si].len() {
                return Err(CoffeeError::Dimension(format!(
                    "query range ends at {hi} but {s} history has {} events",
                    history[si].len()
                )));
            }
            let events = &history[si][lo..hi.max(lo)];
            offsets[si] = lo;
            statics[si] = events
                .iter()
                .map(|e| self.static_forward(store, e))
                .collect::<Result<_>>()?;
            let mut ph = vec![0.0; events.len() * d_t];
            for (e, slot) in events.iter().zip(ph.chunks_exact_mut(d_t)) {
                encode_delta_into((t_ref - e.timestamp) as f64, &self.periods, slot);
            }
            phases[si] = ph;
        }

        let mut predictions = Vec::with_capacity(queries.len());
        let mut loss_sum = 0.0;
        let mut shift = vec![0.0; d_t];
        for q in queries {
            let ad = self.ad_embedding(store, &q.candidate)?;
            encode_delta_into((t_ref - q.request_ts) as f64, &self.periods, &mut shift);
            let mut head_input = Vec::with_capacity(self.config.head_input_dim());
            head_input.extend_from_slice(&ad);
            let mut attention: [Option<Vec<f64>>; 3] = Default::default();
            let mut states: Vec<Option<AttnState>> = Vec::with_capacity(enabled.len());
            for &s in &enabled {
                let si = s.index();
                let sp = &self.sources[si];
                let range = q.ranges[si].clone();
                if range.is_empty() {
                    let null = store.value(sp.null).data();
                    head_input.extend_from_slice(null);
                    head_input.extend(null.iter().zip(&ad).map(|(c, a)| c * a));
                    attention[si] = Some(Vec::new());
                    states.push(None);
                    continue;
                }
                for e in &history[si][range.clone()] {
                    if e.timestamp > q.request_ts {
                        return Err(CoffeeError::Causality {
                            event_ts: e.timestamp,
                            request_ts: q.request_ts,
                        });
                    }
                }
                let project = store.value(sp.project_w);
                let bottom = &project.data()[d_e * d_e..];
                let key_w = store.value(sp.key_w);
                let mut qs = vec![0.0; d_k];
                affine_into(&ad, store.value(sp.query_w), None, &mut qs);
                qs.iter_mut().for_each(|x| *x *= inv_sqrt);
                // kq = W_k · qs, u = P_bottom · kq
                let kq: Vec<f64> = key_w.data().chunks_exact(d_k).map(|row| dot(row, &qs)).collect();
                let u: Vec<f64> = bottom.chunks_exact(d_e).map(|row| dot(row, &kq)).collect();

                let r = range.len();
                let mut times = vec![0.0; r * d_t];
                let mut weights = Vec::with_capacity(r);
                for (row, idx) in range.clone().enumerate() {
                    let k = idx - offsets[si];
                    let ph = &phases[si][k * d_t..(k + 1) * d_t];
                    let t = &mut times[row * d_t..(row + 1) * d_t];
                    for j in 0..half {
                        let (s0, c0) = (ph[2 * j], ph[2 * j + 1]);
                        let (sd, cd) = (shift[2 * j], shift[2 * j + 1]);
                        t[2 * j] = s0 * cd - c0 * sd;
                        t[2 * j + 1] = c0 * cd + s0 * sd;
                    }
                    weights.push(dot(&statics[si][k].projected, &kq) + dot(t, &u));
                }
                softmax_in_place(&mut weights);
                let mut context = store.value(sp.project_b).data().to_vec();
                let mut tbar = vec![0.0; d_t];
                for (row, idx) in range.clone().enumerate() {
                    let w = weights[row];
                    for (c, p) in context.iter_mut().zip(&statics[si][idx - offsets[si]].projected) {
                        *c += w * p;
                    }
                    for (tb, t) in tbar.iter_mut().zip(&times[row * d_t..(row + 1) * d_t]) {
                        *tb += w * t;
                    }
                }
                for (t, prow) in tbar.iter().zip(bottom.chunks_exact(d_e)) {
                    for (c, p) in context.iter_mut().zip(prow) {
                        *c += t * p;
                    }
                }
                head_input.extend_from_slice(&context);
                head_input.extend(context.iter().zip(&ad).map(|(c, a)| c * a));
                attention[si] = Some(weights.clone());
                states.push(Some(AttnState {
                    qs,
                    kq,
                    times,
                    weights,
                    tbar,
                    context,
                }));
            }

            // MLP head
            let mut activations = vec![head_input];
            for (layer, &(w, b)) in self.head.iter().enumerate() {
                let wm = store.value(w);
                let mut out = vec![0.0; wm.cols()];
                affine_into(activations.last().expect("input"), wm, Some(store.value(b).data()), &mut out);
                if layer + 1 < self.head.len() {
                    out.iter_mut().for_each(|x| *x = x.max(0.0));
                }
                activations.push(out);
            }
            let logit = activations.last().expect("output")[0];
            let (p, loss) = sigmoid_bce(logit, q.label);
            loss_sum += loss;
            predictions.push(Prediction {
                p_click: p,
                logit,
                attention,
                ignored_sources: Vec::new(),
            });

            let Some((grads, scale)) = grads.as_mut() else { continue };
            let scale = *scale;

            // backward through the head
            let mut upstream = vec![scale * (p - q.label)];
            for layer in (0..self.head.len()).rev() {
                let (w, b) = self.head[layer];
                let input = &activations[layer];
                let mut dinput = vec![0.0; input.len()];
                {
                    let (wm, dw) = (store.value(w), grads.get_mut(w));
                    affine_backward_accumulate(input, wm, &upstream, Some(&mut dinput), dw, None);
                }
                for (g, u) in grads.get_mut(b).data_mut().iter_mut().zip(&upstream) {
                    *g += u;
                }
                if layer > 0 {
                    // ReLU: gradient passes where the activation is positive
                    for (d, a) in dinput.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                upstream = dinput;
            }
            let dhead = upstream;
            let mut dad = dhead[..d_e].to_vec();
            for (slot, (&s, state)) in enabled.iter().zip(states).enumerate() {
                let si = s.index();
                let sp = &self.sources[si];
                let base = d_e * (1 + 2 * slot);
                let dctx_direct = &dhead[base..base + d_e];
                let dprod = &dhead[base + d_e..base + 2 * d_e];
                let context: &[f64] = match &state {
                    Some(st) => &st.context,
                    None => store.value(sp.null).data(),
                };
                let mut dctx = vec![0.0; d_e];
                for i in 0..d_e {
                    dctx[i] = dctx_direct[i] + dprod[i] * ad[i];
                    dad[i] += dprod[i] * context[i];
                }
                let Some(st) = state else {
                    for (g, d) in grads.get_mut(sp.null).data_mut().iter_mut().zip(&dctx) {
                        *g += d;
                    }
                    continue;
                };
                for (g, d) in grads.get_mut(sp.project_b).data_mut().iter_mut().zip(&dctx) {
                    *g += d;
                }
                let range = q.ranges[si].clone();
                let project = store.value(sp.project_w);
                let bottom = &project.data()[d_e * d_e..];
                let dtbar: Vec<f64> = bottom.chunks_exact(d_e).map(|row| dot(row, &dctx)).collect();

                // softmax backward on g_e = dctx · rep_e (constant terms cancel)
                let mut gs = Vec::with_capacity(range.len());
                for (row, idx) in range.clone().enumerate() {
                    let cached = &statics[si][idx - offsets[si]];
                    gs.push(dot(&dctx, &cached.projected) + dot(&st.times[row * d_t..(row + 1) * d_t], &dtbar));
                }
                let gbar: f64 = st.weights.iter().zip(&gs).map(|(w, g)| w * g).sum();
                let mut m = vec![0.0; d_e];
                let mut tl = vec![0.0; d_t];
                for (row, idx) in range.enumerate() {
                    let w = st.weights[row];
                    let dlogit = w * (gs[row] - gbar);
                    let cached = &mut statics[si][idx - offsets[si]];
                    cached.used = true;
                    for i in 0..d_e {
                        m[i] += dlogit * cached.projected[i];
                        cached.grad[i] += w * dctx[i] + dlogit * st.kq[i];
                    }
                    for (acc, t) in tl.iter_mut().zip(&st.times[row * d_t..(row + 1) * d_t]) {
                        *acc += dlogit * t;
                    }
                }
                // m += tl · P_bottom, then the bottom block gradient
                for (t, prow) in tl.iter().zip(bottom.chunks_exact(d_e)) {
                    for (mi, p) in m.iter_mut().zip(prow) {
                        *mi += t * p;
                    }
                }
                {
                    let dpw = grads.get_mut(sp.project_w);
                    for ((tb, tlj), grow) in st
                        .tbar
                        .iter()
                        .zip(&tl)
                        .zip(dpw.data_mut()[d_e * d_e..].chunks_exact_mut(d_e))
                    {
                        for ((g, dc), kq) in grow.iter_mut().zip(&dctx).zip(&st.kq) {
                            *g += tb * dc + tlj * kq;
                        }
                    }
                }
                let key_w = store.value(sp.key_w);
                let mut dq = vec![0.0; d_k];
                {
                    let dkw = grads.get_mut(sp.key_w);
                    for ((mi, wrow), grow) in m
                        .iter()
                        .zip(key_w.data().chunks_exact(d_k))
                        .zip(dkw.data_mut().chunks_exact_mut(d_k))
                    {
                        for c in 0..d_k {
                            grow[c] += mi * st.qs[c];
                            dq[c] += wrow[c] * mi;
                        }
                    }
                }
                dq.iter_mut().for_each(|x| *x *= inv_sqrt);
                {
                    let (qw, dqw) = (store.value(sp.query_w), grads.get_mut(sp.query_w));
                    affine_backward_accumulate(&ad, qw, &dq, Some(&mut dad), dqw, None);
                }
            }
            // candidate ad embedding
            for (g, d) in grads.get_mut(self.ad_table).row_mut(q.candidate.ad_id).iter_mut().zip(&dad) {
                *g += d;
            }
            {
                let (w, dw) = (store.value(self.ad_dense_w), grads.get_mut(self.ad_dense_w));
                affine_backward_accumulate(q.candidate.content_embedding, w, &dad, None, dw, None);
            }
            for (g, d) in grads.get_mut(self.ad_dense_b).data_mut().iter_mut().zip(&dad) {
                *g += d;
            }
            {
                let row = store.value(self.ad_id_table).row(q.candidate.ad_id);
                let mut drow = vec![0.0; row.len()];
                let (w, dw) = (store.value(self.ad_shared_w), grads.get_mut(self.ad_shared_w));
                affine_backward_accumulate(row, w, &dad, Some(&mut drow), dw, None);
                for (g, d) in grads.get_mut(self.ad_id_table).row_mut(q.candidate.ad_id).iter_mut().zip(&drow) {
                    *g += d;
                }
            }
        }

        if let Some((grads, _)) = grads {
            for &s in &enabled {
                let si = s.index();
                for (k, cached) in statics[si].iter().enumerate() {
                    if cached.used {
                        self.static_backward(store, grads, &history[si][offsets[si] + k], cached);
                    }
                }
            }
        }
        Ok((predictions, loss_sum))
    }

    fn sequences_to_group<'a>(
        &self,
        sequences: &'a [EbfSequence],
    ) -> Result<([&'a [Event]; 3], [Range<usize>; 3], Vec<SourceType>)> {
        let mut history: [&[Event]; 3] = [&[], &[], &[]];
        let mut ranges: [Range<usize>; 3] = [0..0, 0..0, 0..0];
        let mut ignored = Vec::new();
        let mut seen = [false; 3];
        for seq in sequences {
            let si = seq.source.index();
            if seen[si] {
                return Err(CoffeeError::Schema(format!("two sequences for {}", seq.source)));
            }
            seen[si] = true;
            if !self.config.is_enabled(seq.source) {
                ignored.push(seq.source);
                continue;
            }
            let cap = self.config.max_len.get(seq.source);
            if seq.events.len() > cap {
                return Err(CoffeeError::Config(format!(
                    "{} sequence has {} events, cap is {cap}",
                    seq.source,
                    seq.events.len()
                )));
            }
            if let Some(e) = seq.events.iter().find(|e| e.source != seq.source) {
                return Err(CoffeeError::Schema(format!(
                    "{} event inside a {} sequence",
                    e.source, seq.source
                )));
            }
            history[si] = &seq.events;
            ranges[si] = 0..seq.events.len();
        }
        Ok((history, ranges, ignored))
    }

    /// Scores one candidate against a user's sequences.
    pub fn forward(
        &self,
        store: &ParamStore,
        sequences: &[EbfSequence],
        candidate: Candidate<'_>,
        request_ts: i64,
    ) -> Result<Prediction> {
        let (history, ranges, ignored) = self.sequences_to_group(sequences)?;
        let query = GroupQuery {
            candidate,
            request_ts,
            ranges,
            label: 0.0,
        };
        let (mut preds, _) = self.run_group(store, history, std::slice::from_ref(&query), None)?;
        let mut pred = preds.pop().expect("one prediction");
        pred.ignored_sources = ignored;
        Ok(pred)
    }

    /// Forward plus exact gradients of the log loss for one labelled example,
    /// accumulated into the store. Returns the prediction and the loss.
    pub fn forward_backward(
        &self,
        store: &mut ParamStore,
        sequences: &[EbfSequence],
        candidate: Candidate<'_>,
        request_ts: i64,
        label: f64,
    ) -> Result<(Prediction, f64)> {
        let (history, ranges, ignored) = self.sequences_to_group(sequences)?;
        let query = GroupQuery {
            candidate,
            request_ts,
            ranges,
            label,
        };
        let mut grads = store.grad_buffer();
        let (mut preds, loss) =
            self.run_group(store, history, std::slice::from_ref(&query), Some((&mut grads, 1.0)))?;
        store.accumulate_grads(&grads);
        let mut pred = preds.pop().expect("one prediction");
        pred.ignored_sources = ignored;
        Ok((pred, loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{build_ebf_sequence, hour_bucket, Window};
    use crate::numeric::grad_check;

    const T0: i64 = 1_700_000_000;

    fn vocab() -> Vocab {
        Vocab {
            contents: 12,
            ads: 6,
            authors: 3,
            semantic_ids: 4,
            embedding_dim: 3,
        }
    }

    fn small_config(sources: &[SourceType]) -> ModelConfig {
        ModelConfig {
            sources: sources.to_vec(),
            max_len: PerSource::splat(10),
            attr_dim: 3,
            event_dim: 4,
            time_dim: 4,
            attn_dim: 3,
            hidden: vec![5, 3],
            ..ModelConfig::new(vocab())
        }
    }

    fn event(source: SourceType, item: usize, ts: i64) -> Event {
        use AttributeValue::Categorical as C;
        let attributes = match source {
            SourceType::OrganicImpression => vec![C(item), C(item % 8), C(item % 3), C(item % 16), C(hour_bucket(ts))],
            SourceType::AdImpression => vec![C(item % 4), C(item % 6), C(hour_bucket(ts))],
            SourceType::VideoView => vec![C(item), C(item % 3), C(0), C(2), C(5), C(1), C(hour_bucket(ts))],
        };
        Event {
            user_id: 7,
            source,
            timestamp: ts,
            attributes,
        }
    }

    fn sequence(source: SourceType, events: Vec<Event>) -> EbfSequence {
        build_ebf_sequence(7, source, &events, Window::new(T0 - 100 * 86_400, T0).unwrap(), 10).unwrap()
    }

    fn all_sequences() -> Vec<EbfSequence> {
        SourceType::ALL
            .into_iter()
            .map(|s| sequence(s, (0..3).map(|i| event(s, i + 2, T0 - 3_600 * (i as i64 + 1) * 7)).collect()))
            .collect()
    }

    const EMB: [f64; 3] = [0.3, -0.2, 0.5];

    fn candidate() -> Candidate<'static> {
        Candidate {
            ad_id: 2,
            content_embedding: &EMB,
        }
    }

    /// Replaces every parameter with N(0, std) draws so gradients are not tiny.
    fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
        let mut rng = substream(seed, "test-randomize");
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = normal_init(r, c, std, &mut rng);
        }
    }

    #[test]
    fn time_encoding_examples() {
        let zero = encode_timestamp(T0, T0, 8).unwrap();
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(
            encode_timestamp(T0 - 500, T0, 8).unwrap(),
            encode_timestamp(T0 + 1_000 - 500, T0 + 1_000, 8).unwrap()
        );
        for delta in [1, 3_599, 86_400, 10_000_000] {
            assert!(encode_timestamp(T0 - delta, T0, 8).unwrap().iter().all(|x| x.abs() <= 1.0));
        }
        assert!(matches!(
            encode_timestamp(T0 + 1, T0, 8),
            Err(CoffeeError::Causality { .. })
        ));
        let p = periods(8);
        assert_eq!(p.len(), 4);
        assert!((p[0] - 3_600.0).abs() < 1e-9 && (p[3] - 90.0 * 86_400.0).abs() < 1e-6);
    }

    #[test]
    fn zero_parameters_give_zero_representation() {
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 1).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        for s in SourceType::ALL {
            let rep = model.event_representation(&store, &event(s, 3, T0 - 50), T0).unwrap();
            assert_eq!(rep, vec![0.0; 4]);
        }
    }

    #[test]
    fn representation_shape_and_determinism() {
        let (model, store) = SequenceModel::init(small_config(&SourceType::ALL), 1).unwrap();
        for s in SourceType::ALL {
            let a = model.event_representation(&store, &event(s, 3, T0 - 50), T0).unwrap();
            let b = model.event_representation(&store, &event(s, 3, T0 + 50), T0 + 100).unwrap();
            assert_eq!(a.len(), 4);
            assert_eq!(a, b);
        }
        let bad = event(SourceType::OrganicImpression, 99, T0 - 5);
        assert!(matches!(
            model.event_representation(&store, &bad, T0),
            Err(CoffeeError::OutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn zero_head_gives_half() {
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 3).unwrap();
        for id in store.ids().filter(|id| store.name(*id).starts_with("head.")).collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let pred = model.forward(&store, &all_sequences(), candidate(), T0).unwrap();
        assert_eq!(pred.p_click, 0.5);
        let empty = model.forward(&store, &[], candidate(), T0).unwrap();
        assert_eq!(empty.p_click, 0.5);
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 4).unwrap();
        randomize(&mut store, 0.5, 4);
        let pred = model.forward(&store, &all_sequences(), candidate(), T0).unwrap();
        assert!(pred.p_click > 0.0 && pred.p_click < 1.0);
        for s in SourceType::ALL {
            let w = pred.weights(s).unwrap();
            assert_eq!(w.len(), 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_event_gets_all_attention() {
        let s = SourceType::OrganicImpression;
        let (model, mut store) = SequenceModel::init(small_config(&[s]), 5).unwrap();
        randomize(&mut store, 0.5, 5);
        let seq = sequence(s, vec![event(s, 4, T0 - 10)]);
        let pred = model.forward(&store, &[seq], candidate(), T0).unwrap();
        assert_eq!(pred.weights(s).unwrap(), &[1.0]);
    }

    #[test]
    fn fused_attention_matches_kernel_composition() {
        use crate::numeric::scaled_dot_attention;
        let s = SourceType::AdImpression;
        let (model, mut store) = SequenceModel::init(small_config(&[s]), 8).unwrap();
        randomize(&mut store, 0.7, 8);
        let events: Vec<Event> = (0..9)
            .map(|i| event(s, i % 6, T0 - 3_600 * (i as i64 * 37 + 1) - 86_400 * 40 * (i as i64 % 3)))
            .collect();
        let cand = candidate();
        let seq = sequence(s, events);
        let pred = model.forward(&store, std::slice::from_ref(&seq), cand, T0).unwrap();
        let events = seq.events;

        let sp = &model.sources[s.index()];
        let mut values = Matrix::zeros(events.len(), model.config.event_dim);
        let mut keys = Matrix::zeros(events.len(), model.config.attn_dim);
        for (row, e) in events.iter().enumerate() {
            let rep = model.event_representation(&store, e, T0).unwrap();
            affine_into(&rep, store.value(sp.key_w), None, keys.row_mut(row));
            values.row_mut(row).copy_from_slice(&rep);
        }
        let ad = model.ad_embedding(&store, &cand).unwrap();
        let mut query = vec![0.0; model.config.attn_dim];
        affine_into(&ad, store.value(sp.query_w), None, &mut query);
        let att = scaled_dot_attention(&query, &keys, &values).unwrap();
        for (a, b) in att.weights.iter().zip(pred.weights(s).unwrap()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn equal_timestamp_permutation_invariance() {
        let s = SourceType::VideoView;
        let (model, mut store) = SequenceModel::init(small_config(&[s]), 6).unwrap();
        randomize(&mut store, 0.5, 6);
        let events: Vec<Event> = (0..4).map(|i| event(s, i * 2 + 1, T0 - 900)).collect();
        let mut reversed = events.clone();
        reversed.reverse();
        let a = model.forward(&store, &[sequence(s, events)], candidate(), T0).unwrap();
        let b = model.forward(&store, &[sequence(s, reversed)], candidate(), T0).unwrap();
        assert!((a.p_click - b.p_click).abs() < 1e-15);
        let mut wa = a.weights(s).unwrap().to_vec();
        let mut wb = b.weights(s).unwrap().to_vec();
        wb.reverse();
        wa.iter_mut().zip(&wb).for_each(|(x, y)| assert!((*x - y).abs() < 1e-15));
    }

    #[test]
    fn disabled_source_is_ignored_bit_identically() {
        let (model, mut store) = SequenceModel::init(small_config(&[SourceType::AdImpression]), 7).unwrap();
        randomize(&mut store, 0.5, 7);
        let seqs = all_sequences();
        let with_all = model.forward(&store, &seqs, candidate(), T0).unwrap();
        let only_ad = model.forward(&store, &seqs[1..2], candidate(), T0).unwrap();
        assert_eq!(with_all.p_click.to_bits(), only_ad.p_click.to_bits());
        assert_eq!(
            with_all.ignored_sources,
            vec![SourceType::OrganicImpression, SourceType::VideoView]
        );
        assert!(with_all.weights(SourceType::OrganicImpression).is_none());
    }

    #[test]
    fn empty_sequence_uses_null_vector() {
        let s = SourceType::AdImpression;
        let (model, mut store) = SequenceModel::init(small_config(&[s]), 8).unwrap();
        randomize(&mut store, 0.5, 8);
        let empty = sequence(s, Vec::new());
        // ad 1 keeps part of this random head active
        let ad = Candidate {
            ad_id: 1,
            content_embedding: &EMB,
        };
        let a = model.forward(&store, std::slice::from_ref(&empty), ad, T0).unwrap();
        assert_eq!(a.weights(s).unwrap().len(), 0);
        let null = store.id("ad_impression.null").unwrap();
        store.value_mut(null).data_mut().iter_mut().for_each(|x| *x += 3.0);
        let b = model.forward(&store, &[empty], ad, T0).unwrap();
        assert_ne!(a.p_click, b.p_click);
    }

    #[test]
    fn disabled_sources_receive_zero_gradient() {
        let (model, mut store) = SequenceModel::init(small_config(&[SourceType::OrganicImpression]), 9).unwrap();
        randomize(&mut store, 0.5, 9);
        model
            .forward_backward(&mut store, &all_sequences(), candidate(), T0, 1.0)
            .unwrap();
        for s in [SourceType::AdImpression, SourceType::VideoView] {
            for id in model.source_param_ids(s) {
                let grad = store.grad(id);
                if id == model.ad_id_table {
                    // shared with the candidate: only the candidate's row moves
                    for r in (0..grad.rows()).filter(|&r| r != candidate().ad_id) {
                        assert!(grad.row(r).iter().all(|&g| g == 0.0), "ad id row {r}");
                    }
                    continue;
                }
                assert!(grad.data().iter().all(|&g| g == 0.0), "{}", store.name(id));
            }
        }
        let enabled_norm: f64 = model
            .source_param_ids(SourceType::OrganicImpression)
            .into_iter()
            .map(|id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(enabled_norm > 0.0);
    }

    #[test]
    fn identical_examples_identical_gradients() {
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 10).unwrap();
        randomize(&mut store, 0.5, 10);
        let mut a = store.clone();
        let mut b = store.clone();
        model.forward_backward(&mut a, &all_sequences(), candidate(), T0, 0.0).unwrap();
        model.forward_backward(&mut b, &all_sequences(), candidate(), T0, 0.0).unwrap();
        for id in store.ids() {
            assert_eq!(a.grad(id), b.grad(id));
        }
    }

    #[test]
    fn group_runner_matches_single_example_gradients() {
        // Two queries over one shared history, summed, must equal the sum of
        // per-example forward_backward calls on the corresponding sequences.
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 11).unwrap();
        randomize(&mut store, 0.4, 11);
        let history: Vec<Vec<Event>> = SourceType::ALL
            .into_iter()
            .map(|s| (0..4).map(|i| event(s, i + 1, T0 - 5_000 * (i as i64 + 1))).collect())
            .collect();
        let h: [&[Event]; 3] = [&history[0], &history[1], &history[2]];
        let queries = [
            GroupQuery {
                candidate: candidate(),
                request_ts: T0,
                ranges: [0..4, 1..3, 0..0],
                label: 1.0,
            },
            GroupQuery {
                candidate: Candidate {
                    ad_id: 4,
                    content_embedding: &EMB,
                },
                request_ts: T0 - 2_000,
                ranges: [1..4, 0..4, 2..4],
                label: 0.0,
            },
        ];
        let mut grads = store.grad_buffer();
        let (_, loss) = model.run_group(&store, h, &queries, Some((&mut grads, 1.0))).unwrap();

        let mut reference = store.clone();
        let mut ref_loss = 0.0;
        for q in &queries {
            let seqs: Vec<EbfSequence> = SourceType::ALL
                .into_iter()
                .map(|s| EbfSequence {
                    user_id: 7,
                    source: s,
                    window: Window::new(T0 - 100 * 86_400, T0).unwrap(),
                    max_len: 10,
                    events: h[s.index()][q.ranges[s.index()].clone()].to_vec(),
                })
                .collect();
            ref_loss += model
                .forward_backward(&mut reference, &seqs, q.candidate, q.request_ts, q.label)
                .unwrap()
                .1;
        }
        assert!((loss - ref_loss).abs() < 1e-12);
        for id in store.ids() {
            for (a, b) in grads.get(id).data().iter().zip(reference.grad(id).data()) {
                assert!((a - b).abs() < 1e-12, "{}", store.name(id));
            }
        }
    }

    #[test]
    fn full_model_matches_finite_differences() {
        let (model, mut store) = SequenceModel::init(small_config(&SourceType::ALL), 12).unwrap();
        randomize(&mut store, 0.3, 12);
        let seqs = all_sequences();
        let report = grad_check(
            &mut store,
            |st| model.forward_backward(st, &seqs, candidate(), T0, 1.0).unwrap().1,
            24,
            1e-4,
            12,
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(&SourceType::ALL);
        cfg.max_len.set(SourceType::VideoView, MAX_ONLINE_LEN + 1);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(&SourceType::ALL);
        cfg.time_dim = 3;
        assert!(cfg.validate().is_err());
        let cfg = small_config(&[SourceType::AdImpression, SourceType::AdImpression]);
        assert!(cfg.validate().is_err());
        let cfg = small_config(&[SourceType::VideoView]);
        assert_eq!(ModelConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn bind_rejects_mismatched_store() {
        let (_, store) = SequenceModel::init(small_config(&SourceType::ALL), 13).unwrap();
        let mut other = small_config(&SourceType::ALL);
        other.event_dim = 5;
        assert!(matches!(SequenceModel::bind(other, &store), Err(CoffeeError::Format(_))));
    }
}
