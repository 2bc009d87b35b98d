//! Engagement events, per-source attribute schemas, and assembly of raw logs
//! into event-based feature (EBF) sequences.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};

/// Hard cap on attributes per event; keeps the event module cheap enough for
/// real-time scoring.
pub const MAX_ATTRIBUTES: usize = 10;

pub const DWELL_BUCKETS: usize = 8;
pub const POSITION_BUCKETS: usize = 16;
pub const MEDIA_TYPES: usize = 3;
pub const HOUR_BUCKETS: usize = 24;
pub const PAGE_IDS: usize = 16;
pub const CONTENT_TYPES: usize = 2;

/// Dwell-time bucket edges span 250 ms to one hour on a log scale.
const DWELL_MIN_MS: f64 = 250.0;
const DWELL_MAX_MS: f64 = 3_600_000.0;

/// Name of the attribute appended by k-NN enrichment.
pub const ENRICHMENT_ATTRIBUTE: &str = "knn_embedding";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    OrganicImpression,
    AdImpression,
    VideoView,
}

impl SourceType {
    pub const ALL: [SourceType; 3] = [
        SourceType::OrganicImpression,
        SourceType::AdImpression,
        SourceType::VideoView,
    ];

    pub fn index(self) -> usize {
        match self {
            SourceType::OrganicImpression => 0,
            SourceType::AdImpression => 1,
            SourceType::VideoView => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SourceType::OrganicImpression => "organic_impression",
            SourceType::AdImpression => "ad_impression",
            SourceType::VideoView => "video_view",
        }
    }

    /// Human-readable label used in ROI tables.
    pub fn label(self) -> &'static str {
        match self {
            SourceType::OrganicImpression => "organic impression",
            SourceType::AdImpression => "ad impression",
            SourceType::VideoView => "video view",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "organic_impression" => Ok(SourceType::OrganicImpression),
            "ad_impression" => Ok(SourceType::AdImpression),
            "video_view" => Ok(SourceType::VideoView),
            other => Err(CoffeeError::Schema(format!("unknown source tag `{other}`"))),
        }
    }

    /// Base attribute names in schema order.
    pub fn attribute_names(self) -> &'static [&'static str] {
        match self {
            SourceType::OrganicImpression => {
                &["content_id", "dwell_time", "media_type", "position", "timestamp"]
            }
            SourceType::AdImpression => &["semantic_id", "ad_id", "timestamp"],
            SourceType::VideoView => &[
                "video_id",
                "author_id",
                "post_id",
                "dwell_time",
                "page_id",
                "content_type",
                "timestamp",
            ],
        }
    }

    /// Position of the attribute identifying the catalog item the event is about.
    pub fn item_attribute(self) -> usize {
        match self {
            SourceType::OrganicImpression | SourceType::VideoView => 0,
            SourceType::AdImpression => 1,
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttributeValue {
    Categorical(usize),
    Dense(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttrKind {
    Categorical { cardinality: usize },
    Dense { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrSpec {
    pub name: String,
    pub kind: AttrKind,
}

/// Catalog sizes that fix the cardinality of id-valued attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub contents: usize,
    pub ads: usize,
    pub authors: usize,
    pub semantic_ids: usize,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSchema {
    pub source: SourceType,
    pub attributes: Vec<AttrSpec>,
}

impl SourceSchema {
    pub fn new(source: SourceType, vocab: &Vocab) -> Self {
        use AttrKind::Categorical as Cat;
        let cards: Vec<usize> = match source {
            SourceType::OrganicImpression => vec![
                vocab.contents,
                DWELL_BUCKETS,
                MEDIA_TYPES,
                POSITION_BUCKETS,
                HOUR_BUCKETS,
            ],
            SourceType::AdImpression => vec![vocab.semantic_ids, vocab.ads, HOUR_BUCKETS],
            SourceType::VideoView => vec![
                vocab.contents,
                vocab.authors,
                // post-id 0 means "no parent post"
                vocab.contents + 1,
                DWELL_BUCKETS,
                PAGE_IDS,
                CONTENT_TYPES,
                HOUR_BUCKETS,
            ],
        };
        let attributes = source
            .attribute_names()
            .iter()
            .zip(cards)
            .map(|(name, cardinality)| AttrSpec {
                name: (*name).to_string(),
                kind: Cat { cardinality },
            })
            .collect();
        SourceSchema { source, attributes }
    }

    /// Schema of events carrying the appended k-NN embedding attribute.
    pub fn enriched(source: SourceType, vocab: &Vocab) -> Self {
        let mut schema = Self::new(source, vocab);
        schema.attributes.push(AttrSpec {
            name: ENRICHMENT_ATTRIBUTE.to_string(),
            kind: AttrKind::Dense {
                dim: vocab.embedding_dim,
            },
        });
        schema
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub user_id: usize,
    pub source: SourceType,
    /// Unix seconds.
    pub timestamp: i64,
    pub attributes: Vec<AttributeValue>,
}

impl Event {
    /// Catalog id of the content or ad this event refers to, if present.
    pub fn item_id(&self) -> Option<usize> {
        match self.attributes.get(self.source.item_attribute()) {
            Some(AttributeValue::Categorical(id)) => Some(*id),
            _ => None,
        }
    }

    pub fn is_enriched(&self) -> bool {
        self.attributes.len() > self.source.attribute_names().len()
    }
}

/// Closed interval of unix seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end <= start {
            return Err(CoffeeError::InvalidWindow { start, end });
        }
        Ok(Window { start, end })
    }

    /// Window of `days` ending one second before `request_ts`, so nothing at
    /// or after the request can enter the history.
    pub fn before(request_ts: i64, days: u32) -> Self {
        Window {
            start: request_ts - i64::from(days) * 86_400,
            end: request_ts - 1,
        }
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts <= self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbfSequence {
    pub user_id: usize,
    pub source: SourceType,
    pub window: Window,
    pub max_len: usize,
    /// Most recent first.
    pub events: Vec<Event>,
}

impl EbfSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Stable sort by descending timestamp; equal timestamps keep insertion order.
pub fn sort_most_recent_first(events: &mut [Event]) {
    events.sort_by(|a, b| b.timestamp.cmp(&a.timestamp));
}

/// Index range of the `r` most recent events inside `window`, given events
/// already sorted most-recent-first.
pub fn window_range(sorted: &[Event], window: Window, r: usize) -> Range<usize> {
    let lo = sorted.partition_point(|e| e.timestamp > window.end);
    let hi = lo + sorted[lo..].partition_point(|e| e.timestamp >= window.start);
    lo..hi.min(lo + r)
}

pub fn build_ebf_sequence(
    user_id: usize,
    source: SourceType,
    events: &[Event],
    window: Window,
    r: usize,
) -> Result<EbfSequence> {
    if window.end <= window.start {
        return Err(CoffeeError::InvalidWindow {
            start: window.start,
            end: window.end,
        });
    }
    if r == 0 {
        return Err(CoffeeError::Config("max sequence length must be >= 1".into()));
    }
    if let Some(bad) = events
        .iter()
        .find(|e| e.user_id != user_id || e.source != source)
    {
        return Err(CoffeeError::Schema(format!(
            "sequence for user {user_id}/{source} received event of user {}/{}",
            bad.user_id, bad.source
        )));
    }
    let mut kept: Vec<Event> = events
        .iter()
        .filter(|e| window.contains(e.timestamp))
        .cloned()
        .collect();
    sort_most_recent_first(&mut kept);
    kept.truncate(r);
    Ok(EbfSequence {
        user_id,
        source,
        window,
        max_len: r,
        events: kept,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    AttributeCountExceeded(usize),
    SourceMismatch { expected: SourceType, found: SourceType },
    CountMismatch { expected: usize, found: usize },
    KindMismatch { name: String },
    IdOutOfRange { name: String, id: usize, cardinality: usize },
    DimensionMismatch { name: String, expected: usize, found: usize },
    NonFinite { name: String },
    NonPositiveTimestamp(i64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AttributeCountExceeded(n) => {
                write!(f, "attribute count exceeds {MAX_ATTRIBUTES} (got {n})")
            }
            Violation::SourceMismatch { expected, found } => {
                write!(f, "source {found} does not match schema {expected}")
            }
            Violation::CountMismatch { expected, found } => {
                write!(f, "expected {expected} attributes, found {found}")
            }
            Violation::KindMismatch { name } => write!(f, "attribute `{name}` has the wrong kind"),
            Violation::IdOutOfRange {
                name,
                id,
                cardinality,
            } => write!(f, "id out of range: `{name}` = {id} >= {cardinality}"),
            Violation::DimensionMismatch {
                name,
                expected,
                found,
            } => write!(f, "attribute `{name}` has dimension {found}, expected {expected}"),
            Violation::NonFinite { name } => write!(f, "attribute `{name}` has non-finite entries"),
            Violation::NonPositiveTimestamp(ts) => write!(f, "timestamp {ts} is not positive"),
        }
    }
}

pub fn validate_event(event: &Event, schema: &SourceSchema) -> Vec<Violation> {
    let mut violations = Vec::new();
    if event.attributes.len() > MAX_ATTRIBUTES {
        violations.push(Violation::AttributeCountExceeded(event.attributes.len()));
    }
    if event.source != schema.source {
        violations.push(Violation::SourceMismatch {
            expected: schema.source,
            found: event.source,
        });
    }
    if event.timestamp <= 0 {
        violations.push(Violation::NonPositiveTimestamp(event.timestamp));
    }
    if event.attributes.len() != schema.len() {
        violations.push(Violation::CountMismatch {
            expected: schema.len(),
            found: event.attributes.len(),
        });
    }
    for (value, spec) in event.attributes.iter().zip(&schema.attributes) {
        match (value, spec.kind) {
            (AttributeValue::Categorical(id), AttrKind::Categorical { cardinality }) => {
                if *id >= cardinality {
                    violations.push(Violation::IdOutOfRange {
                        name: spec.name.clone(),
                        id: *id,
                        cardinality,
                    });
                }
            }
            (AttributeValue::Dense(v), AttrKind::Dense { dim }) => {
                if v.len() != dim {
                    violations.push(Violation::DimensionMismatch {
                        name: spec.name.clone(),
                        expected: dim,
                        found: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    violations.push(Violation::NonFinite {
                        name: spec.name.clone(),
                    });
                }
            }
            _ => violations.push(Violation::KindMismatch {
                name: spec.name.clone(),
            }),
        }
    }
    violations
}

/// Bucket index for a dwell time in milliseconds (8 log-spaced buckets over
/// 250 ms .. 1 h, clamped at both ends).
pub fn dwell_bucket(dwell_ms: f64) -> usize {
    let clamped = dwell_ms.clamp(DWELL_MIN_MS, DWELL_MAX_MS);
    let frac = (clamped / DWELL_MIN_MS).ln() / (DWELL_MAX_MS / DWELL_MIN_MS).ln();
    ((frac * DWELL_BUCKETS as f64) as usize).min(DWELL_BUCKETS - 1)
}

/// Feed position bucket: positions past the last bucket share it.
pub fn position_bucket(position: usize) -> usize {
    position.min(POSITION_BUCKETS - 1)
}

/// Hour-of-day code stored in the `timestamp` attribute slot.
pub fn hour_bucket(ts: i64) -> usize {
    (ts.rem_euclid(86_400) / 3_600) as usize
}

#[derive(Serialize, Deserialize)]
struct WireEvent {
    user_id: usize,
    source: String,
    timestamp: i64,
    attributes: Vec<WireAttribute>,
}

#[derive(Serialize, Deserialize)]
struct WireAttribute {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dense: Option<Vec<f64>>,
}

fn attribute_name(source: SourceType, index: usize) -> &'static str {
    source
        .attribute_names()
        .get(index)
        .copied()
        .unwrap_or(ENRICHMENT_ATTRIBUTE)
}

/// Serializes one event as a single JSON line (no trailing newline).
pub fn event_to_json(event: &Event) -> String {
    let wire = WireEvent {
        user_id: event.user_id,
        source: event.source.tag().to_string(),
        timestamp: event.timestamp,
        attributes: event
            .attributes
            .iter()
            .enumerate()
            .map(|(i, value)| {
                let name = attribute_name(event.source, i).to_string();
                match value {
                    AttributeValue::Categorical(id) => WireAttribute {
                        name,
                        cat: Some(*id),
                        dense: None,
                    },
                    AttributeValue::Dense(v) => WireAttribute {
                        name,
                        cat: None,
                        dense: Some(v.clone()),
                    },
                }
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("event serialization is infallible")
}

pub fn event_from_json(line: &str, line_no: usize) -> Result<Event> {
    let wire: WireEvent = serde_json::from_str(line).map_err(|e| CoffeeError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let source = SourceType::from_tag(&wire.source)
        .map_err(|e| CoffeeError::Schema(format!("line {line_no}: {e}")))?;
    let mut attributes = Vec::with_capacity(wire.attributes.len());
    for (i, attr) in wire.attributes.into_iter().enumerate() {
        let expected = attribute_name(source, i);
        if attr.name != expected {
            return Err(CoffeeError::Schema(format!(
                "line {line_no}: attribute {i} is `{}`, expected `{expected}`",
                attr.name
            )));
        }
        let value = match (attr.cat, attr.dense) {
            (Some(id), None) => AttributeValue::Categorical(id),
            (None, Some(v)) => AttributeValue::Dense(v),
            _ => {
                return Err(CoffeeError::Parse {
                    line: line_no,
                    message: format!("attribute `{expected}` needs exactly one of `cat` or `dense`"),
                })
            }
        };
        attributes.push(value);
    }
    Ok(Event {
        user_id: wire.user_id,
        source,
        timestamp: wire.timestamp,
        attributes,
    })
}

pub fn write_events<W: Write>(events: &[Event], mut out: W) -> std::io::Result<()> {
    for event in events {
        out.write_all(event_to_json(event).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CoffeeError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(event_from_json(&line, i + 1)?);
    }
    Ok(events)
}

pub fn write_event_log(events: &[Event], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoffeeError::io(path, e))?;
    write_events(events, BufWriter::new(file)).map_err(|e| CoffeeError::io(path, e))
}

pub fn read_event_log(path: &Path) -> Result<Vec<Event>> {
    let file = std::fs::File::open(path).map_err(|e| CoffeeError::io(path, e))?;
    read_events(BufReader::new(file))
}
