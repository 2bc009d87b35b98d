//! Seeded synthetic universe: users with latent intent, content and ad
//! catalogs, engagement logs for all three sources, and click labels.
//!
//! Everything here is planted. Click probability is
//! `σ(w0 + w1·⟨intent, ad⟩ + w2·s_ad + w3·s_org)` where `s_ad` and `s_org` are
//! recency-weighted mean affinities of the user's past ad and organic
//! impressions to the candidate ad. Choosing `w2 > w3 > 0` makes ad
//! impressions the most predictive source by construction.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::enrichment::{assign_semantic_id, train_codebook, Codebook, KnnIndex};
use crate::error::{CoffeeError, Result};
use crate::event::{
    dwell_bucket, hour_bucket, position_bucket, sort_most_recent_first, AttributeValue, Event,
    SourceType, Vocab, CONTENT_TYPES, MEDIA_TYPES, PAGE_IDS,
};
use crate::numeric::{dot, sigmoid, Matrix};
use crate::rng::{digest_bytes, substream};

/// Start of simulated time (unix seconds).
pub const EPOCH: i64 = 1_700_006_400;
pub const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub users: usize,
    pub contents: usize,
    pub ads: usize,
    pub authors: usize,
    pub topics: usize,
    pub d_z: usize,
    pub d_c: usize,
    pub horizon_days: u32,
    /// Requests are drawn after this many days so every user has history.
    pub warmup_days: u32,
    pub requests_per_user: usize,
    /// Mean events per day; per-user rates are log-normal around it.
    pub activity_rate: f64,
    pub activity_spread: f64,
    /// Share of events per source: organic, ad, video.
    pub source_mix: [f64; 3],
    /// Item-choice sharpness: P(item) ∝ exp(beta·⟨intent, affinity⟩).
    pub beta: f64,
    /// Sharpness of the ad-serving distribution for requests.
    pub serve_beta: f64,
    /// Spread of users and items around their topic centroid.
    pub topic_noise: f64,
    /// Distinct topics mixed into each user's intent.
    pub interests_per_user: usize,
    /// Per-event affinity to an ad is exp(sharpness·(cos − 1)).
    pub affinity_sharpness: f64,
    /// Probability that an ad impression re-shows one of the user's running
    /// campaigns instead of drawing a fresh ad.
    pub ad_repeat: f64,
    /// Share of video views started by autoplay on a uniformly random video.
    pub video_autoplay: f64,
    /// Same as `ad_repeat` for organic impressions re-showing a recent post.
    pub organic_repeat: f64,
    /// How long a freshly drawn ad or post keeps running for that user.
    pub campaign_days: f64,
    /// Share of requests that re-serve an ad from the user's recent impressions.
    pub retarget_rate: f64,
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub tau_days: f64,
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            users: 2000,
            contents: 2000,
            ads: 500,
            authors: 200,
            topics: 10,
            d_z: 8,
            d_c: 16,
            horizon_days: 30,
            warmup_days: 7,
            requests_per_user: 50,
            activity_rate: 28.0,
            activity_spread: 0.3,
            source_mix: [0.3, 0.5, 0.2],
            beta: 5.0,
            serve_beta: 0.5,
            topic_noise: 0.15,
            interests_per_user: 2,
            affinity_sharpness: 4.0,
            ad_repeat: 0.8,
            organic_repeat: 0.0,
            video_autoplay: 0.5,
            campaign_days: 5.0,
            retarget_rate: 0.6,
            w0: -1.5,
            w1: 1.0,
            w2: 2.0,
            w3: 0.8,
            tau_days: 7.0,
            codebook_size: 256,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("contents", self.contents),
            ("ads", self.ads),
            ("authors", self.authors),
            ("topics", self.topics),
            ("d_c", self.d_c),
            ("codebook_size", self.codebook_size),
            ("requests_per_user", self.requests_per_user),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CoffeeError::Config(format!("`{name}` must be >= 1")));
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.topics {
            return Err(CoffeeError::Config("interests_per_user must lie in 1..=topics".into()));
        }
        if self.d_z < 2 {
            return Err(CoffeeError::Config("`d_z` must be >= 2".into()));
        }
        if self.horizon_days == 0 || self.warmup_days >= self.horizon_days {
            return Err(CoffeeError::Config(
                "need horizon_days >= 1 and warmup_days < horizon_days".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ad_repeat)
            || !(0.0..=1.0).contains(&self.organic_repeat)
            || !(0.0..=1.0).contains(&self.video_autoplay)
            || !(0.0..=1.0).contains(&self.retarget_rate)
            || !(self.campaign_days > 0.0)
        {
            return Err(CoffeeError::Config(
                "repeat, autoplay and retarget rates must lie in [0, 1]; campaign_days must be positive".into(),
            ));
        }
        if !(self.activity_rate > 0.0) || self.tau_days <= 0.0 {
            return Err(CoffeeError::Config("activity_rate and tau_days must be positive".into()));
        }
        if self.source_mix.iter().any(|&m| m < 0.0) || self.source_mix.iter().sum::<f64>() <= 0.0 {
            return Err(CoffeeError::Config("source_mix must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: WorldConfig = toml::from_str(text).map_err(|e| CoffeeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoffeeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn digest(&self) -> String {
        digest_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: usize,
    pub intent: Vec<f64>,
    pub activity_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentItem {
    pub id: usize,
    pub topic_affinity: Vec<f64>,
    pub content_embedding: Vec<f64>,
    pub author_id: usize,
    pub media_type: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdItem {
    pub id: usize,
    pub topic_affinity: Vec<f64>,
    pub content_embedding: Vec<f64>,
    pub semantic_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub user_id: usize,
    pub ad_id: usize,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user_id: usize,
    pub ad_id: usize,
    pub timestamp: i64,
    pub label: u8,
}

impl TrainingExample {
    pub fn request(&self) -> Request {
        Request {
            user_id: self.user_id,
            ad_id: self.ad_id,
            timestamp: self.timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserProfile>,
    pub contents: Vec<ContentItem>,
    pub ads: Vec<AdItem>,
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

fn around(centroid: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = centroid
        .iter()
        .map(|c| c + noise * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    normalize(v)
}

/// Deterministic function of `(config, seed)`; `seed` overrides `config.seed`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut config = config.clone();
    config.seed = seed;
    let mut rng = substream(seed, "world");
    let centroids: Vec<Vec<f64>> = (0..config.topics)
        .map(|_| normalize(unit_gaussian(config.d_z, &mut rng)))
        .collect();
    // fixed projection from topic space to the content-embedding space
    let projection = Matrix::from_vec(
        config.d_z,
        config.d_c,
        (0..config.d_z * config.d_c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f64>>(),
    )?;
    let embed = |affinity: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut out = vec![0.0; config.d_c];
        crate::numeric::affine_into(affinity, &projection, None, &mut out);
        out.iter_mut()
            .for_each(|x| *x += 0.1 * Distribution::<f64>::sample(&StandardNormal, rng));
        out
    };
    let spread = LogNormal::new(-config.activity_spread.powi(2) / 2.0, config.activity_spread)
        .map_err(|e| CoffeeError::Config(e.to_string()))?;

    let users = (0..config.users)
        .map(|user_id| {
            let topics = rand::seq::index::sample(&mut rng, config.topics, config.interests_per_user);
            let mut mix = vec![0.0; config.d_z];
            for t in topics.iter() {
                mix.iter_mut().zip(&centroids[t]).for_each(|(m, c)| *m += c);
            }
            UserProfile {
                user_id,
                intent: around(&normalize(mix), config.topic_noise, &mut rng),
                activity_rate: config.activity_rate * spread.sample(&mut rng),
            }
        })
        .collect();
    let contents = (0..config.contents)
        .map(|id| {
            let t = rng.random_range(0..config.topics);
            let topic_affinity = around(&centroids[t], config.topic_noise, &mut rng);
            let content_embedding = embed(&topic_affinity, &mut rng);
            ContentItem {
                id,
                topic_affinity,
                content_embedding,
                author_id: rng.random_range(0..config.authors),
                media_type: rng.random_range(0..MEDIA_TYPES),
            }
        })
        .collect();
    let mut ads: Vec<AdItem> = (0..config.ads)
        .map(|id| {
            let t = rng.random_range(0..config.topics);
            let topic_affinity = around(&centroids[t], config.topic_noise, &mut rng);
            let content_embedding = embed(&topic_affinity, &mut rng);
            AdItem {
                id,
                topic_affinity,
                content_embedding,
                semantic_id: 0,
            }
        })
        .collect();

    let codebook = ad_codebook(&config, &ads)?;
    for ad in &mut ads {
        ad.semantic_id = assign_semantic_id(&codebook, &ad.content_embedding);
    }
    Ok(World {
        config,
        users,
        contents,
        ads,
    })
}

fn ad_codebook(config: &WorldConfig, ads: &[AdItem]) -> Result<Codebook> {
    let rows: Vec<Vec<f64>> = ads.iter().map(|a| a.content_embedding.clone()).collect();
    let embeddings = Matrix::from_rows(&rows)?;
    train_codebook(&embeddings, config.codebook_size.min(ads.len()), 20, config.seed)
}

impl World {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            contents: self.contents.len(),
            ads: self.ads.len(),
            authors: self.config.authors,
            semantic_ids: self.config.codebook_size.min(self.ads.len()),
            embedding_dim: self.config.d_c,
        }
    }

    /// Codebook used for ad semantic ids; retrained deterministically.
    pub fn codebook(&self) -> Result<Codebook> {
        ad_codebook(&self.config, &self.ads)
    }

    /// Exact k-NN index over the ad catalog's content embeddings.
    pub fn ad_index(&self) -> Result<KnnIndex> {
        let rows: Vec<Vec<f64>> = self.ads.iter().map(|a| a.content_embedding.clone()).collect();
        KnnIndex::new(Matrix::from_rows(&rows)?, (0..self.ads.len()).collect())
    }

    /// Exact k-NN index over the content catalog.
    pub fn content_index(&self) -> Result<KnnIndex> {
        let rows: Vec<Vec<f64>> = self
            .contents
            .iter()
            .map(|c| c.content_embedding.clone())
            .collect();
        KnnIndex::new(Matrix::from_rows(&rows)?, (0..self.contents.len()).collect())
    }

    /// Topic affinity of the catalog item an event refers to.
    pub fn item_affinity(&self, event: &Event) -> Option<&[f64]> {
        let id = event.item_id()?;
        match event.source {
            SourceType::AdImpression => self.ads.get(id).map(|a| a.topic_affinity.as_slice()),
            _ => self.contents.get(id).map(|c| c.topic_affinity.as_slice()),
        }
    }

    pub fn horizon_end(&self) -> i64 {
        EPOCH + i64::from(self.config.horizon_days) * DAY
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        self.write_jsonl(&mut bytes).expect("in-memory write");
        digest_bytes(&bytes)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut line = |record: WorldRecord<'_>| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")
        };
        line(WorldRecord::Config(&self.config))?;
        for u in &self.users {
            line(WorldRecord::User(u))?;
        }
        for c in &self.contents {
            line(WorldRecord::Content(c))?;
        }
        for a in &self.ads {
            line(WorldRecord::Ad(a))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<World> {
        let mut config = None;
        let (mut users, mut contents, mut ads) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| CoffeeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: OwnedWorldRecord = serde_json::from_str(&line).map_err(|e| CoffeeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match record {
                OwnedWorldRecord::Config(c) => config = Some(c),
                OwnedWorldRecord::User(u) => users.push(u),
                OwnedWorldRecord::Content(c) => contents.push(c),
                OwnedWorldRecord::Ad(a) => ads.push(a),
            }
        }
        let config = config.ok_or_else(|| CoffeeError::Parse {
            line: 1,
            message: "world file has no config record".into(),
        })?;
        let dense = |ids: Vec<usize>, what: &str| -> Result<()> {
            if ids.iter().enumerate().any(|(i, &id)| i != id) {
                return Err(CoffeeError::Schema(format!("{what} ids are not dense 0..N-1")));
            }
            Ok(())
        };
        dense(users.iter().map(|u: &UserProfile| u.user_id).collect(), "user")?;
        dense(contents.iter().map(|c: &ContentItem| c.id).collect(), "content")?;
        dense(ads.iter().map(|a: &AdItem| a.id).collect(), "ad")?;
        Ok(World {
            config,
            users,
            contents,
            ads,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CoffeeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CoffeeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<World> {
        let file = std::fs::File::open(path).map_err(|e| CoffeeError::io(path, e))?;
        World::read_jsonl(BufReader::new(file))
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord<'a> {
    Config(&'a WorldConfig),
    User(&'a UserProfile),
    Content(&'a ContentItem),
    Ad(&'a AdItem),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OwnedWorldRecord {
    Config(WorldConfig),
    User(UserProfile),
    Content(ContentItem),
    Ad(AdItem),
}

/// Cumulative softmax weights of `beta·⟨intent, affinity⟩` over a catalog.
fn choice_cdf<'a>(intent: &[f64], affinities: impl Iterator<Item = &'a [f64]>, beta: f64) -> Vec<f64> {
    let logits: Vec<f64> = affinities.map(|a| beta * dot(intent, a)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    logits
        .iter()
        .map(|l| {
            acc += (l - max).exp();
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
}

/// Samples an item index with P ∝ softmax(beta·⟨intent, affinity⟩).
pub fn choose_item<'a>(
    intent: &[f64],
    affinities: impl Iterator<Item = &'a [f64]>,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    sample_cdf(&choice_cdf(intent, affinities, beta), rng)
}

/// Items currently "running" for one user (ad campaigns, trending posts):
/// each draw either repeats one of them or samples a fresh item, which then
/// runs for `duration` seconds.
struct Running {
    duration: i64,
    items: Vec<(usize, i64)>,
}

impl Running {
    fn new(duration: i64) -> Self {
        Running {
            duration,
            items: Vec::new(),
        }
    }

    fn draw(&mut self, ts: i64, repeat: f64, cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
        self.items.retain(|&(_, expiry)| expiry > ts);
        if !self.items.is_empty() && rng.random::<f64>() < repeat {
            return self.items[rng.random_range(0..self.items.len())].0;
        }
        let fresh = sample_cdf(cdf, rng);
        self.items.push((fresh, ts + self.duration));
        fresh
    }
}

/// Simulates engagement for every user over `horizon_days`. Events come out
/// grouped by user, oldest first within a user.
pub fn simulate_events(world: &World, horizon_days: u32, seed: u64) -> Result<Vec<Event>> {
    if horizon_days == 0 {
        return Err(CoffeeError::Config("horizon_days must be >= 1".into()));
    }
    let cfg = &world.config;
    let mut rng = substream(seed, "events");
    let mix_total: f64 = cfg.source_mix.iter().sum();
    let horizon_secs = i64::from(horizon_days) * DAY;
    let mut events = Vec::new();
    for user in &world.users {
        let mean = user.activity_rate * f64::from(horizon_days);
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| CoffeeError::Config(e.to_string()))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        if count == 0 {
            continue;
        }
        let content_cdf = choice_cdf(
            &user.intent,
            world.contents.iter().map(|c| c.topic_affinity.as_slice()),
            cfg.beta,
        );
        let ad_cdf = choice_cdf(
            &user.intent,
            world.ads.iter().map(|a| a.topic_affinity.as_slice()),
            cfg.beta,
        );
        let mut slots: Vec<(i64, SourceType)> = (0..count)
            .map(|_| {
                let timestamp = EPOCH + rng.random_range(0..horizon_secs);
                let pick = rng.random::<f64>() * mix_total;
                let source = if pick < cfg.source_mix[0] {
                    SourceType::OrganicImpression
                } else if pick < cfg.source_mix[0] + cfg.source_mix[1] {
                    SourceType::AdImpression
                } else {
                    SourceType::VideoView
                };
                (timestamp, source)
            })
            .collect();
        slots.sort_by_key(|&(ts, _)| ts);
        let duration = (cfg.campaign_days * DAY as f64) as i64;
        let mut campaigns = Running::new(duration);
        let mut trending = Running::new(duration);
        let mut user_events = Vec::with_capacity(count);
        for (timestamp, source) in slots {
            let hour = AttributeValue::Categorical(hour_bucket(timestamp));
            let attributes = match source {
                SourceType::AdImpression => {
                    let ad_id = campaigns.draw(timestamp, cfg.ad_repeat, &ad_cdf, &mut rng);
                    let ad = &world.ads[ad_id];
                    vec![
                        AttributeValue::Categorical(ad.semantic_id),
                        AttributeValue::Categorical(ad.id),
                        hour,
                    ]
                }
                SourceType::OrganicImpression => {
                    let item = &world.contents[trending.draw(timestamp, cfg.organic_repeat, &content_cdf, &mut rng)];
                    let dwell = sample_dwell_ms(&user.intent, &item.topic_affinity, &mut rng);
                    vec![
                        AttributeValue::Categorical(item.id),
                        AttributeValue::Categorical(dwell_bucket(dwell)),
                        AttributeValue::Categorical(item.media_type),
                        AttributeValue::Categorical(position_bucket(rng.random_range(0..40))),
                        hour,
                    ]
                }
                SourceType::VideoView => {
                    let pick = if rng.random::<f64>() < cfg.video_autoplay {
                        rng.random_range(0..world.contents.len())
                    } else {
                        sample_cdf(&content_cdf, &mut rng)
                    };
                    let item = &world.contents[pick];
                    let dwell = sample_dwell_ms(&user.intent, &item.topic_affinity, &mut rng);
                    let post = if rng.random::<f64>() < 0.3 {
                        rng.random_range(0..world.contents.len()) + 1
                    } else {
                        0
                    };
                    let content_type = usize::from(rng.random::<f64>() < 0.05).min(CONTENT_TYPES - 1);
                    vec![
                        AttributeValue::Categorical(item.id),
                        AttributeValue::Categorical(item.author_id),
                        AttributeValue::Categorical(post),
                        AttributeValue::Categorical(dwell_bucket(dwell)),
                        AttributeValue::Categorical(rng.random_range(0..PAGE_IDS)),
                        AttributeValue::Categorical(content_type),
                        hour,
                    ]
                }
            };
            user_events.push(Event {
                user_id: user.user_id,
                source,
                timestamp,
                attributes,
            });
        }
        events.extend(user_events);
    }
    Ok(events)
}

/// Log-normal dwell time whose mean grows with user-item affinity.
fn sample_dwell_ms(intent: &[f64], affinity: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let mu = 4_000f64.ln() + 1.5 * dot(intent, affinity);
    let z: f64 = StandardNormal.sample(rng);
    (mu + 0.8 * z).exp()
}

/// Draws `per_user` ad requests per user after the warm-up period. With
/// probability `retarget_rate` the request re-serves an ad the user saw during
/// the last `campaign_days`; otherwise ads are served with
/// P ∝ softmax(serve_beta·⟨intent, ad⟩).
pub fn generate_requests(world: &World, histories: &UserHistories, per_user: usize, seed: u64) -> Vec<Request> {
    let cfg = &world.config;
    let mut rng = substream(seed, "requests");
    let start = EPOCH + i64::from(cfg.warmup_days) * DAY;
    let end = world.horizon_end();
    let lookback = (cfg.campaign_days * DAY as f64) as i64;
    let mut requests = Vec::with_capacity(world.users.len() * per_user);
    for user in &world.users {
        let cdf = choice_cdf(
            &user.intent,
            world.ads.iter().map(|a| a.topic_affinity.as_slice()),
            cfg.serve_beta,
        );
        for _ in 0..per_user {
            let timestamp = rng.random_range(start..end);
            let retarget = rng.random::<f64>() < cfg.retarget_rate;
            let seen: &[Event] = if retarget && user.user_id < histories.users() {
                let past = histories.before(user.user_id, SourceType::AdImpression, timestamp);
                &past[..past.partition_point(|e| e.timestamp >= timestamp - lookback)]
            } else {
                &[]
            };
            let ad_id = match seen {
                [] => sample_cdf(&cdf, &mut rng),
                _ => seen[rng.random_range(0..seen.len())]
                    .item_id()
                    .expect("ad impressions carry an ad id"),
            };
            requests.push(Request {
                user_id: user.user_id,
                ad_id,
                timestamp,
            });
        }
    }
    requests
}

/// Per-user, per-source event lists, most recent first.
#[derive(Clone, Debug, Default)]
pub struct UserHistories {
    per_user: Vec<[Vec<Event>; 3]>,
}

impl UserHistories {
    pub fn new(events: &[Event], users: usize) -> Result<Self> {
        let mut per_user: Vec<[Vec<Event>; 3]> = (0..users).map(|_| Default::default()).collect();
        for e in events {
            let slot = per_user.get_mut(e.user_id).ok_or_else(|| {
                CoffeeError::UnknownId(format!("event references user {}", e.user_id))
            })?;
            slot[e.source.index()].push(e.clone());
        }
        for lists in &mut per_user {
            for list in lists.iter_mut() {
                sort_most_recent_first(list);
            }
        }
        Ok(UserHistories { per_user })
    }

    pub fn users(&self) -> usize {
        self.per_user.len()
    }

    pub fn get(&self, user: usize, source: SourceType) -> &[Event] {
        &self.per_user[user][source.index()]
    }

    /// Applies `f` to every stored event of `source`, e.g. for enrichment.
    pub fn map_source<F>(&self, source: SourceType, mut f: F) -> Result<Self>
    where
        F: FnMut(&Event) -> Result<Event>,
    {
        let mut out = self.clone();
        for lists in &mut out.per_user {
            for e in lists[source.index()].iter_mut() {
                *e = f(e)?;
            }
        }
        Ok(out)
    }

    /// Events of `source` strictly before `ts`, most recent first.
    pub fn before(&self, user: usize, source: SourceType, ts: i64) -> &[Event] {
        let list = self.get(user, source);
        let lo = list.partition_point(|e| e.timestamp >= ts);
        &list[lo..]
    }
}

/// The two history scores entering the click model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryScores {
    pub s_ad: f64,
    pub s_org: f64,
}

/// Recency-weighted mean affinity of past events to `ad`, using only events
/// strictly before `ts`. Zero for an empty history.
pub fn recency_affinity(world: &World, past: &[Event], ad: &AdItem, ts: i64) -> f64 {
    let tau = world.config.tau_days * DAY as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for e in past {
        let Some(aff) = world.item_affinity(e) else { continue };
        let rho = (-((ts - e.timestamp) as f64) / tau).exp();
        num += rho * event_affinity(world, aff, &ad.topic_affinity);
        den += rho;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Affinity of one engaged item to an ad: exp(sharpness·(cos − 1)) ∈ (0, 1].
pub fn event_affinity(world: &World, item: &[f64], ad: &[f64]) -> f64 {
    (world.config.affinity_sharpness * (dot(item, ad) - 1.0)).exp()
}

pub fn history_scores(world: &World, histories: &UserHistories, request: &Request) -> Result<HistoryScores> {
    let ad = world
        .ads
        .get(request.ad_id)
        .ok_or_else(|| CoffeeError::UnknownId(format!("ad {}", request.ad_id)))?;
    if request.user_id >= histories.users() {
        return Err(CoffeeError::UnknownId(format!("user {}", request.user_id)));
    }
    let past_ads = histories.before(request.user_id, SourceType::AdImpression, request.timestamp);
    let past_org = histories.before(request.user_id, SourceType::OrganicImpression, request.timestamp);
    Ok(HistoryScores {
        s_ad: recency_affinity(world, past_ads, ad, request.timestamp),
        s_org: recency_affinity(world, past_org, ad, request.timestamp),
    })
}

/// Generative click probability given the history scores.
pub fn click_probability(world: &World, user: usize, ad: usize, scores: HistoryScores) -> f64 {
    let cfg = &world.config;
    let intent_match = dot(&world.users[user].intent, &world.ads[ad].topic_affinity);
    sigmoid(cfg.w0 + cfg.w1 * intent_match + cfg.w2 * scores.s_ad + cfg.w3 * scores.s_org)
}

/// True click probability of a request under the planted model.
pub fn true_click_probability(world: &World, histories: &UserHistories, request: &Request) -> Result<f64> {
    if request.user_id >= world.users.len() {
        return Err(CoffeeError::UnknownId(format!("user {}", request.user_id)));
    }
    let scores = history_scores(world, histories, request)?;
    Ok(click_probability(world, request.user_id, request.ad_id, scores))
}

pub fn simulate_labels(
    world: &World,
    requests: &[Request],
    histories: &UserHistories,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    if requests.is_empty() {
        return Err(CoffeeError::Config("no requests to label".into()));
    }
    let mut rng = substream(seed, "labels");
    requests
        .iter()
        .map(|r| {
            let p = true_click_probability(world, histories, r)?;
            let label = u8::from(rng.random::<f64>() < p);
            Ok(TrainingExample {
                user_id: r.user_id,
                ad_id: r.ad_id,
                timestamp: r.timestamp,
                label,
            })
        })
        .collect()
}

/// Everything a training run consumes, derived deterministically from a world.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub histories: UserHistories,
    pub examples: Vec<TrainingExample>,
}

impl Dataset {
    /// Simulates events, requests and labels from the world's own seed.
    pub fn simulate(world: &World) -> Result<Self> {
        let seed = world.config.seed;
        let events = simulate_events(world, world.config.horizon_days, seed)?;
        let histories = UserHistories::new(&events, world.users.len())?;
        let requests = generate_requests(world, &histories, world.config.requests_per_user, seed);
        let examples = simulate_labels(world, &requests, &histories, seed)?;
        Ok(Dataset {
            histories,
            examples,
        })
    }

    pub fn from_parts(world: &World, events: &[Event], examples: Vec<TrainingExample>) -> Result<Self> {
        Ok(Dataset {
            histories: UserHistories::new(events, world.users.len())?,
            examples,
        })
    }
}

pub fn write_examples<W: Write>(examples: &[TrainingExample], mut out: W) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_examples<R: BufRead>(input: R) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CoffeeError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line).map_err(|e| CoffeeError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.label > 1 {
            return Err(CoffeeError::Parse {
                line: i + 1,
                message: format!("label {} is not 0 or 1", ex.label),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{validate_event, SourceSchema};

    fn small_config() -> WorldConfig {
        WorldConfig {
            users: 40,
            contents: 120,
            ads: 30,
            authors: 10,
            codebook_size: 16,
            requests_per_user: 10,
            activity_rate: 6.0,
            horizon_days: 10,
            warmup_days: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let cfg = small_config();
        let a = generate_world(&cfg, 3).unwrap();
        let b = generate_world(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.users.len(), a.contents.len(), a.ads.len()), (40, 120, 30));
        let c = generate_world(&cfg, 4).unwrap();
        assert!(a.users.iter().zip(&c.users).any(|(x, y)| x.intent != y.intent));
        for u in &a.users {
            assert!((dot(&u.intent, &u.intent).sqrt() - 1.0).abs() < 1e-9);
            assert!(u.activity_rate > 0.0);
        }
        for ad in &a.ads {
            assert!((dot(&ad.topic_affinity, &ad.topic_affinity).sqrt() - 1.0).abs() < 1e-9);
            assert!(ad.semantic_id < a.vocab().semantic_ids);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let zero_users = WorldConfig {
            users: 0,
            ..small_config()
        };
        assert!(matches!(generate_world(&zero_users, 1), Err(CoffeeError::Config(_))));
        let flat = WorldConfig {
            d_z: 1,
            ..small_config()
        };
        assert!(generate_world(&flat, 1).is_err());
        assert!(WorldConfig::from_toml_str("users = 3\nbogus = 1").is_err());
    }

    #[test]
    fn events_conform_to_schemas() {
        let world = generate_world(&small_config(), 9).unwrap();
        let events = simulate_events(&world, 10, 9).unwrap();
        assert!(!events.is_empty());
        let vocab = world.vocab();
        for e in &events {
            let schema = SourceSchema::new(e.source, &vocab);
            assert!(validate_event(e, &schema).is_empty(), "{e:?}");
            assert!(e.timestamp >= EPOCH && e.timestamp < world.horizon_end());
        }
        assert_eq!(events, simulate_events(&world, 10, 9).unwrap());
    }

    #[test]
    fn near_zero_activity_gives_empty_log() {
        let cfg = WorldConfig {
            activity_rate: 1e-9,
            ..small_config()
        };
        let world = generate_world(&cfg, 1).unwrap();
        assert!(simulate_events(&world, 1, 1).unwrap().len() <= 1);
    }

    #[test]
    fn zero_weights_give_coin_flips() {
        let cfg = WorldConfig {
            w0: 0.0,
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            ..small_config()
        };
        let world = generate_world(&cfg, 2).unwrap();
        let events = simulate_events(&world, 10, 2).unwrap();
        let hist = UserHistories::new(&events, world.users.len()).unwrap();
        for r in generate_requests(&world, &hist, 3, 2) {
            assert_eq!(true_click_probability(&world, &hist, &r).unwrap(), 0.5);
        }
    }

    #[test]
    fn click_probability_is_monotone_in_ad_history() {
        let world = generate_world(&small_config(), 5).unwrap();
        let low = click_probability(&world, 0, 0, HistoryScores { s_ad: 0.1, s_org: 0.2 });
        let high = click_probability(&world, 0, 0, HistoryScores { s_ad: 0.4, s_org: 0.2 });
        assert!(high > low);
        let higher_org = click_probability(&world, 0, 0, HistoryScores { s_ad: 0.1, s_org: 0.5 });
        assert!(higher_org > low);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let world = generate_world(&small_config(), 5).unwrap();
        let hist = UserHistories::new(&[], world.users.len()).unwrap();
        let bad = Request {
            user_id: 0,
            ad_id: 999,
            timestamp: EPOCH + DAY,
        };
        assert!(matches!(
            simulate_labels(&world, &[bad], &hist, 1),
            Err(CoffeeError::UnknownId(_))
        ));
        assert!(simulate_labels(&world, &[], &hist, 1).is_err());
    }

    #[test]
    fn history_scores_ignore_future_events() {
        let world = generate_world(&small_config(), 6).unwrap();
        let events = simulate_events(&world, 10, 6).unwrap();
        let hist = UserHistories::new(&events, world.users.len()).unwrap();
        let ts = EPOCH + 5 * DAY;
        let past: Vec<Event> = events.iter().filter(|e| e.timestamp < ts).cloned().collect();
        let past_hist = UserHistories::new(&past, world.users.len()).unwrap();
        for ad_id in 0..5 {
            let r = Request {
                user_id: 3,
                ad_id,
                timestamp: ts,
            };
            assert_eq!(
                history_scores(&world, &hist, &r).unwrap(),
                history_scores(&world, &past_hist, &r).unwrap()
            );
        }
    }

    #[test]
    fn world_file_round_trip() {
        let world = generate_world(&small_config(), 8).unwrap();
        let mut bytes = Vec::new();
        world.write_jsonl(&mut bytes).unwrap();
        assert_eq!(World::read_jsonl(bytes.as_slice()).unwrap(), world);
    }
}
