//! Richer event semantics: exact k-NN over content embeddings (appended to
//! events as an extra dense attribute) and k-means codebooks that turn
//! embeddings into semantic ids.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;

use crate::error::{CoffeeError, Result};
use crate::event::{AttributeValue, Event, SourceType, MAX_ATTRIBUTES};
use crate::numeric::{cof1, Matrix};
use crate::rng::substream;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    embeddings: Matrix,
    ids: Vec<usize>,
    position: HashMap<usize, usize>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnIndex {
    pub fn new(embeddings: Matrix, ids: Vec<usize>) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(CoffeeError::Config("k-NN index needs at least one item".into()));
        }
        if ids.len() != embeddings.rows() {
            return Err(CoffeeError::Dimension(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.rows()
            )));
        }
        if embeddings.data().iter().any(|x| x.is_nan()) {
            return Err(CoffeeError::Config("k-NN index embeddings contain NaN".into()));
        }
        let position: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if position.len() != ids.len() {
            return Err(CoffeeError::Config("duplicate ids in k-NN index".into()));
        }
        Ok(KnnIndex {
            embeddings,
            ids,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embedding_of(&self, id: usize) -> Option<&[f64]> {
        self.position.get(&id).map(|&i| self.embeddings.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids = Matrix::from_vec(self.ids.len(), 1, self.ids.iter().map(|&i| i as f64).collect())
            .expect("ids column");
        let mut out = Vec::new();
        cof1::write_magic(&mut out);
        cof1::write_section(&mut out, *b"KNNI", &[("embeddings", &self.embeddings), ("ids", &ids)]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = cof1::read_sections(bytes)?;
        let records = cof1::find_section(&sections, *b"KNNI")?;
        let get = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| CoffeeError::Format(format!("KNNI section lacks `{name}`")))
        };
        let ids = get("ids")?.data().iter().map(|&x| x as usize).collect();
        KnnIndex::new(get("embeddings")?.clone(), ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoffeeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoffeeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Exact nearest neighbours by L2 distance, ascending, ties by ascending id.
pub fn knn_query(index: &KnnIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > index.len() {
        return Err(CoffeeError::Config(format!(
            "k = {k} outside 1..={}",
            index.len()
        )));
    }
    if query.len() != index.dim() {
        return Err(CoffeeError::Dimension(format!(
            "query dim {} vs index dim {}",
            query.len(),
            index.dim()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| (squared_distance(query, index.embeddings.row(i)), index.ids[i]))
        .collect();
    let by_distance_then_id =
        |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_id);
        scored.truncate(k);
    }
    scored.sort_by(by_distance_then_id);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Matrix,
}

impl Codebook {
    pub fn from_centroids(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 || !centroids.is_finite() {
            return Err(CoffeeError::Config("codebook needs at least one finite centroid".into()));
        }
        Ok(Codebook { centroids })
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        cof1::write_magic(&mut out);
        cof1::write_section(&mut out, *b"CDBK", &[("centroids", &self.centroids)]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = cof1::read_sections(bytes)?;
        let records = cof1::find_section(&sections, *b"CDBK")?;
        let (_, centroids) = records
            .iter()
            .find(|(n, _)| n == "centroids")
            .ok_or_else(|| CoffeeError::Format("CDBK section lacks `centroids`".into()))?;
        Codebook::from_centroids(centroids.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoffeeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoffeeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn nearest_centroid(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Nearest centroid, ties to the lowest index.
pub fn assign_semantic_id(codebook: &Codebook, embedding: &[f64]) -> usize {
    nearest_centroid(&codebook.centroids, embedding).0
}

fn count_distinct(points: &Matrix) -> usize {
    let mut seen = HashSet::new();
    for i in 0..points.rows() {
        let key: Vec<u64> = points.row(i).iter().map(|x| x.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

pub fn train_codebook(embeddings: &Matrix, size: usize, iterations: usize, seed: u64) -> Result<Codebook> {
    train_codebook_traced(embeddings, size, iterations, seed).map(|(cb, _)| cb)
}

/// k-means++ seeding followed by `iterations` Lloyd steps. Also returns the
/// within-cluster sum of squares after seeding and after every step.
pub fn train_codebook_traced(
    embeddings: &Matrix,
    size: usize,
    iterations: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    if size == 0 {
        return Err(CoffeeError::Config("codebook size must be >= 1".into()));
    }
    let distinct = count_distinct(embeddings);
    if size > distinct {
        return Err(CoffeeError::Config(format!(
            "codebook size {size} exceeds {distinct} distinct embeddings"
        )));
    }
    let n = embeddings.rows();
    let dim = embeddings.cols();
    let mut rng = substream(seed, "kmeans++");

    let mut centroids = Matrix::zeros(size, dim);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(embeddings.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(embeddings.row(i), centroids.row(0)))
        .collect();
    for c in 1..size {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.row_mut(c).copy_from_slice(embeddings.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(squared_distance(embeddings.row(i), centroids.row(c)));
        }
    }

    let mut assignment = vec![0usize; n];
    let wcss_of = |centroids: &Matrix, assignment: &[usize]| -> f64 {
        (0..n)
            .map(|i| squared_distance(embeddings.row(i), centroids.row(assignment[i])))
            .sum()
    };
    for (i, a) in assignment.iter_mut().enumerate() {
        *a = nearest_centroid(&centroids, embeddings.row(i)).0;
    }
    let mut history = vec![wcss_of(&centroids, &assignment)];

    for _ in 0..iterations {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest_centroid(&centroids, embeddings.row(i)).0;
        }
        let mut sums = Matrix::zeros(size, dim);
        let mut counts = vec![0usize; size];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums.row_mut(a).iter_mut().zip(embeddings.row(i)) {
                *s += x;
            }
        }
        for c in 0..size {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        history.push(wcss_of(&centroids, &assignment));
    }
    Ok((Codebook { centroids }, history))
}

/// Appends the mean embedding of the `k` nearest catalog neighbours of the
/// event's item as a dense attribute. Ad impressions also get their
/// semantic id re-derived from `codebook`.
pub fn enrich_event(event: &Event, index: &KnnIndex, codebook: &Codebook, k: usize) -> Result<Event> {
    if event.attributes.len() >= MAX_ATTRIBUTES {
        return Err(CoffeeError::AttributeBudget(event.attributes.len()));
    }
    if event.is_enriched() {
        return Err(CoffeeError::Schema(format!(
            "event of user {} at {} is already enriched",
            event.user_id, event.timestamp
        )));
    }
    let item = event
        .item_id()
        .ok_or_else(|| CoffeeError::Schema("event has no item id attribute".into()))?;
    let embedding = index
        .embedding_of(item)
        .ok_or_else(|| CoffeeError::UnknownId(format!("item {item} has no embedding")))?;
    let neighbours = knn_query(index, embedding, k)?;
    let mut mean = vec![0.0; index.dim()];
    for id in &neighbours {
        let row = index.embedding_of(*id).expect("neighbour ids come from the index");
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let inv = 1.0 / neighbours.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);

    let mut enriched = event.clone();
    if event.source == SourceType::AdImpression {
        enriched.attributes[0] = AttributeValue::Categorical(assign_semantic_id(codebook, embedding));
    }
    enriched.attributes.push(AttributeValue::Dense(mean));
    Ok(enriched)
}
