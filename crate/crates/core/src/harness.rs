//! Sweeps over event sources, sequence lengths and enrichment. Each config
//! point is one training run; its snapshots become a scaling curve of NE gain
//! against normalized training capacity, measured against an ad-only baseline
//! trained on the same split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::event::SourceType;
use crate::metrics::{best_fit_slope, curve_auc, ne_gain, normalize_capacity, ScalingCurve};
use crate::model::{ModelConfig, PerSource, MAX_ONLINE_LEN};
use crate::rng::digest_bytes;
use crate::trainer::{run_digest, train, RunRecord, TrainConfig};
use crate::world::{generate_world, Dataset, World, WorldConfig};

/// Reference ROI figures shown next to measured values. Display only.
pub const REFERENCE_ROI: [(&str, bool, f64, f64); 4] = [
    ("video_view", false, 0.155, 1.82),
    ("organic_impression", false, 0.235, 2.37),
    ("ad_impression", false, 0.486, 4.69),
    ("ad_impression", true, 0.758, 7.12),
];
pub const REFERENCE_ENRICHMENT_RATIOS: (f64, f64) = (1.56, 1.52);
pub const REFERENCE_CTR_AUC: (f64, f64) = (0.6721, 0.6759);

/// Model dimensions shared by every point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub attr_dim: usize,
    pub event_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub hidden: Vec<usize>,
    pub enrichment_k: usize,
    pub window_days: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::new(Default::default());
        ModelSettings {
            attr_dim: base.attr_dim,
            event_dim: base.event_dim,
            time_dim: base.time_dim,
            attn_dim: base.attn_dim,
            hidden: base.hidden,
            enrichment_k: base.enrichment_k,
            window_days: base.window_days,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, world: &World, sources: &[SourceType], max_len: usize, enrichment: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(world.vocab());
        cfg.sources = sources.to_vec();
        cfg.max_len = PerSource::splat(max_len);
        cfg.attr_dim = self.attr_dim;
        cfg.event_dim = self.event_dim;
        cfg.time_dim = self.time_dim;
        cfg.attn_dim = self.attn_dim;
        cfg.hidden = self.hidden.clone();
        cfg.enrichment = enrichment;
        cfg.enrichment_k = self.enrichment_k;
        cfg.window_days = self.window_days;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Source subsets; each subset is one family of curves.
    pub sources: Vec<Vec<SourceType>>,
    pub lengths: Vec<usize>,
    /// Enrichment settings to try. Enrichment only touches ad impressions,
    /// so enriched points are generated only for subsets containing them.
    pub enrichment: Vec<bool>,
    /// Replicate training seeds. The world comes from `world.seed`.
    pub seeds: Vec<u64>,
    /// Parallel runs; each run is itself deterministic.
    pub workers: usize,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub model: ModelSettings,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sources: SourceType::ALL.iter().map(|&s| vec![s]).collect(),
            lengths: vec![50, 100, 200, 400],
            enrichment: vec![false, true],
            seeds: vec![42],
            workers: 1,
            world: WorldConfig::default(),
            train: TrainConfig {
                lr: 3e-3,
                ..TrainConfig::default()
            },
            model: ModelSettings::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.lengths.is_empty() || self.enrichment.is_empty() || self.seeds.is_empty() {
            return Err(CoffeeError::Config("every sweep axis needs at least one value".into()));
        }
        for subset in &self.sources {
            if subset.is_empty() {
                return Err(CoffeeError::Config("empty source subset; the baseline is added automatically".into()));
            }
            let mut sorted = subset.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != subset.len() {
                return Err(CoffeeError::Config(format!("duplicate source in subset {subset:?}")));
            }
        }
        if self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoffeeError::Config("lengths must be positive and strictly ascending".into()));
        }
        if let Some(&r) = self.lengths.last().filter(|&&r| r > MAX_ONLINE_LEN) {
            return Err(CoffeeError::Config(format!("length {r} exceeds {MAX_ONLINE_LEN}")));
        }
        if self.enrichment.len() > 1 && self.enrichment[0] == self.enrichment[1] {
            return Err(CoffeeError::Config("duplicate enrichment setting".into()));
        }
        if self.enrichment.len() > 2 {
            return Err(CoffeeError::Config("enrichment takes at most two settings".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CoffeeError::Config("duplicate replicate seed".into()));
        }
        if self.workers == 0 {
            return Err(CoffeeError::Config("workers must be >= 1".into()));
        }
        self.world.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| CoffeeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoffeeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("sweep config serializes")
    }

    /// Digest of the result-determining fields (`workers` excluded).
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 1;
        digest_bytes(serde_json::to_string(&canonical).expect("sweep config serializes").as_bytes())
    }

    /// Every non-baseline config point, in a fixed order.
    pub fn points(&self) -> Vec<ConfigPoint> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for subset in &self.sources {
                for &enrichment in &self.enrichment {
                    if enrichment && !subset.contains(&SourceType::AdImpression) {
                        continue;
                    }
                    for &max_len in &self.lengths {
                        out.push(ConfigPoint {
                            sources: subset.clone(),
                            max_len,
                            enrichment,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub sources: Vec<SourceType>,
    pub max_len: usize,
    pub enrichment: bool,
    pub seed: u64,
}

impl ConfigPoint {
    /// `ad_impression`, `organic_impression+video_view`, or `none` for the baseline.
    pub fn label(&self) -> String {
        source_label(&self.sources)
    }
}

pub fn source_label(sources: &[SourceType]) -> String {
    if sources.is_empty() {
        return "none".into();
    }
    sources.iter().map(|s| s.tag()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub source: String,
    pub enrichment: bool,
    pub curve_auc: f64,
    pub slope: f64,
}

impl RoiRow {
    pub fn from_curve(curve: &ScalingCurve) -> Result<Self> {
        Ok(RoiRow {
            source: curve.source.clone(),
            enrichment: curve.enriched,
            curve_auc: curve_auc(curve)?,
            slope: best_fit_slope(curve)?,
        })
    }

    pub fn reference(&self) -> Option<(f64, f64)> {
        REFERENCE_ROI
            .iter()
            .find(|(s, e, _, _)| *s == self.source && *e == self.enrichment)
            .map(|&(_, _, a, b)| (a, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: ConfigPoint,
    pub record: RunRecord,
    pub curve: ScalingCurve,
    pub roi: RoiRow,
    /// Raw sample counts behind the curve's normalized x values.
    pub capacity_raw: Vec<usize>,
}

impl PointResult {
    pub fn final_gain(&self) -> f64 {
        self.curve.points.last().expect("curve has points").1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub point: ConfigPoint,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub sweep_digest: String,
    /// One baseline per replicate seed, in seed order.
    pub baselines: Vec<(u64, RunRecord)>,
    pub points: Vec<PointResult>,
    pub failures: Vec<PointFailure>,
}

/// Converts a run's snapshots into NE gain over the baseline at matched
/// sample counts.
pub fn scaling_curve(label: &str, enriched: bool, baseline: &RunRecord, run: &RunRecord) -> Result<(ScalingCurve, Vec<usize>)> {
    if baseline.eval_digest != run.eval_digest {
        return Err(CoffeeError::Comparability("run and baseline were evaluated on different sets".into()));
    }
    let matched = baseline.snapshots.len() == run.snapshots.len()
        && baseline
            .snapshots
            .iter()
            .zip(&run.snapshots)
            .all(|(a, b)| a.samples == b.samples);
    if !matched {
        return Err(CoffeeError::Comparability("run and baseline snapshots are at different sample counts".into()));
    }
    let raw: Vec<usize> = run.snapshots.iter().map(|s| s.samples).collect();
    let xs = normalize_capacity(&raw.iter().map(|&s| s as f64).collect::<Vec<_>>())?;
    let points = xs
        .into_iter()
        .zip(baseline.snapshots.iter().zip(&run.snapshots))
        .map(|(x, (b, r))| (x, ne_gain(b.ne, r.ne)))
        .collect();
    Ok((ScalingCurve::new(label, enriched, points)?, raw))
}

/// Results cache keyed by run digest, one JSON file per run.
struct RunCache<'a> {
    dir: Option<&'a Path>,
}

impl RunCache<'_> {
    fn path(&self, digest: &str) -> Option<std::path::PathBuf> {
        self.dir.map(|d| d.join(format!("{digest}.json")))
    }

    fn get(&self, digest: &str) -> Option<RunRecord> {
        let text = fs::read_to_string(self.path(digest)?).ok()?;
        serde_json::from_str::<RunRecord>(&text)
            .ok()
            .filter(|r| r.config_digest == digest)
    }

    fn put(&self, record: &RunRecord) -> Result<()> {
        let Some(path) = self.path(&record.config_digest) else { return Ok(()) };
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let text = serde_json::to_string_pretty(record).expect("record serializes");
        fs::write(&tmp, text).map_err(|e| CoffeeError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CoffeeError::io(&path, e))
    }
}

struct Job {
    point: ConfigPoint,
    config: ModelConfig,
}

fn run_job(world: &World, dataset: &Dataset, sweep: &SweepConfig, cache: &RunCache<'_>, job: &Job) -> Result<RunRecord> {
    let tc = TrainConfig {
        seed: job.point.seed,
        ..sweep.train.clone()
    };
    let digest = run_digest(world, &job.config, &tc);
    if let Some(hit) = cache.get(&digest) {
        return Ok(hit);
    }
    let run = train(world, dataset, &job.config, &tc, &mut |_| {})?;
    cache.put(&run.record)?;
    Ok(run.record)
}

/// Runs every config point plus one baseline per seed. Failed points are
/// recorded and the sweep carries on. `log` receives one line per finished run.
pub fn run_sweep(sweep: &SweepConfig, cache_dir: Option<&Path>, log: &(dyn Fn(&str) + Sync)) -> Result<SweepOutcome> {
    sweep.validate()?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| CoffeeError::io(dir, e))?;
    }
    let world = generate_world(&sweep.world, sweep.world.seed)?;
    let dataset = Dataset::simulate(&world)?;
    let cache = RunCache { dir: cache_dir };

    let baseline_len = sweep.lengths[0];
    let mut jobs: Vec<Job> = sweep
        .seeds
        .iter()
        .map(|&seed| Job {
            point: ConfigPoint {
                sources: Vec::new(),
                max_len: baseline_len,
                enrichment: false,
                seed,
            },
            config: sweep.model.model_config(&world, &[], baseline_len, false),
        })
        .collect();
    jobs.extend(sweep.points().into_iter().map(|point| Job {
        config: sweep.model.model_config(&world, &point.sources, point.max_len, point.enrichment),
        point,
    }));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.workers)
        .build()
        .map_err(|e| CoffeeError::Config(format!("thread pool: {e}")))?;
    let records: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let out = run_job(&world, &dataset, sweep, &cache, job);
                let p = &job.point;
                match &out {
                    Ok(r) => log(&format!(
                        "{} r={} enrich={} seed={}: ne {:.4} auc {:.4}",
                        p.label(),
                        p.max_len,
                        p.enrichment,
                        p.seed,
                        r.final_snapshot().ne,
                        r.final_snapshot().auc
                    )),
                    Err(e) => log(&format!("{} r={} seed={} failed: {e}", p.label(), p.max_len, p.seed)),
                }
                out
            })
            .collect()
    });

    let mut records = records.into_iter();
    let mut baselines = Vec::new();
    for &seed in &sweep.seeds {
        match records.next().expect("one record per job") {
            Ok(r) => baselines.push((seed, r)),
            Err(e) => return Err(CoffeeError::Report(format!("baseline for seed {seed} failed: {e}"))),
        }
    }
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (job, record) in jobs.into_iter().skip(sweep.seeds.len()).zip(records) {
        let point = job.point;
        let baseline = &baselines.iter().find(|(s, _)| *s == point.seed).expect("baseline per seed").1;
        let built = record.and_then(|record| {
            let (curve, capacity_raw) = scaling_curve(&point.label(), point.enrichment, baseline, &record)?;
            let roi = RoiRow::from_curve(&curve)?;
            Ok(PointResult {
                point: point.clone(),
                record,
                curve,
                roi,
                capacity_raw,
            })
        });
        match built {
            Ok(p) => points.push(p),
            Err(e) => failures.push(PointFailure {
                point,
                error: e.to_string(),
            }),
        }
    }
    Ok(SweepOutcome {
        sweep_digest: sweep.digest(),
        baselines,
        points,
        failures,
    })
}

/// Mean curve AUC and slope of one (source, enrichment) family across
/// lengths and seeds, in the layout of an ROI table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSummary {
    pub source: String,
    pub enrichment: bool,
    pub curve_auc: f64,
    pub slope: f64,
    pub points: usize,
    pub reference_auc: Option<f64>,
    pub reference_slope: Option<f64>,
}

pub fn roi_summary(points: &[PointResult]) -> Vec<RoiSummary> {
    let mut groups: BTreeMap<(String, bool), Vec<&RoiRow>> = BTreeMap::new();
    for p in points {
        groups.entry((p.roi.source.clone(), p.roi.enrichment)).or_default().push(&p.roi);
    }
    groups
        .into_iter()
        .map(|((source, enrichment), rows)| {
            let n = rows.len() as f64;
            let probe = rows[0];
            let reference = probe.reference();
            RoiSummary {
                curve_auc: rows.iter().map(|r| r.curve_auc).sum::<f64>() / n,
                slope: rows.iter().map(|r| r.slope).sum::<f64>() / n,
                points: rows.len(),
                reference_auc: reference.map(|r| r.0),
                reference_slope: reference.map(|r| r.1),
                source,
                enrichment,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentComparison {
    pub auc_unenriched: f64,
    pub auc_enriched: f64,
    pub auc_ratio: f64,
    pub slope_unenriched: f64,
    pub slope_enriched: f64,
    pub slope_ratio: f64,
    pub reference_auc_ratio: f64,
    pub reference_slope_ratio: f64,
}

/// Enriched over unenriched ROI for the ad-impression family, each side
/// averaged over its curves.
pub fn compare_enrichment(unenriched: &[ScalingCurve], enriched: &[ScalingCurve]) -> Result<EnrichmentComparison> {
    if unenriched.is_empty() || enriched.is_empty() {
        return Err(CoffeeError::Report("enrichment comparison needs both enriched and unenriched curves".into()));
    }
    let mean = |curves: &[ScalingCurve], f: fn(&ScalingCurve) -> Result<f64>| -> Result<f64> {
        let total = curves.iter().map(f).sum::<Result<f64>>()?;
        Ok(total / curves.len() as f64)
    };
    let (a0, a1) = (mean(unenriched, curve_auc)?, mean(enriched, curve_auc)?);
    let (s0, s1) = (mean(unenriched, best_fit_slope)?, mean(enriched, best_fit_slope)?);
    Ok(EnrichmentComparison {
        auc_unenriched: a0,
        auc_enriched: a1,
        auc_ratio: a1 / a0,
        slope_unenriched: s0,
        slope_enriched: s1,
        slope_ratio: s1 / s0,
        reference_auc_ratio: REFERENCE_ENRICHMENT_RATIOS.0,
        reference_slope_ratio: REFERENCE_ENRICHMENT_RATIOS.1,
    })
}

/// Selects the ad-impression-only curves of a sweep with the given enrichment.
pub fn ad_curves(points: &[PointResult], enriched: bool) -> Vec<ScalingCurve> {
    points
        .iter()
        .filter(|p| p.point.sources == [SourceType::AdImpression] && p.point.enrichment == enriched)
        .map(|p| p.curve.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub source: String,
    pub enrichment: bool,
    pub lengths: Vec<usize>,
    pub gains: Vec<f64>,
    /// `gains[i + 1] - gains[i]`
    pub marginal: Vec<f64>,
    /// Marginal gains never increase.
    pub saturating: bool,
    pub strictly_decreasing: bool,
}

/// Marginal NE gain between consecutive lengths of one curve family.
pub fn saturation_report(source: &str, enrichment: bool, family: &[(usize, f64)]) -> Result<SaturationRow> {
    if family.len() < 3 {
        return Err(CoffeeError::InsufficientData(format!(
            "saturation needs at least 3 lengths, got {}",
            family.len()
        )));
    }
    if family.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(CoffeeError::InsufficientData("lengths must be strictly ascending".into()));
    }
    let marginal: Vec<f64> = family.windows(2).map(|w| w[1].1 - w[0].1).collect();
    Ok(SaturationRow {
        source: source.into(),
        enrichment,
        lengths: family.iter().map(|p| p.0).collect(),
        gains: family.iter().map(|p| p.1).collect(),
        saturating: marginal.windows(2).all(|w| w[1] <= w[0]),
        strictly_decreasing: marginal.windows(2).all(|w| w[1] < w[0]),
        marginal,
    })
}

/// One saturation row per (source, enrichment) family with enough lengths.
/// The gain at a length is its final-snapshot NE gain, averaged over seeds.
pub fn sweep_saturation(points: &[PointResult]) -> Vec<SaturationRow> {
    let mut families: BTreeMap<(String, bool), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for p in points {
        families
            .entry((p.point.label(), p.point.enrichment))
            .or_default()
            .entry(p.point.max_len)
            .or_default()
            .push(p.final_gain());
    }
    families
        .into_iter()
        .filter_map(|((source, enrichment), by_len)| {
            let family: Vec<(usize, f64)> = by_len
                .into_iter()
                .map(|(r, g)| (r, g.iter().sum::<f64>() / g.len() as f64))
                .collect();
            saturation_report(&source, enrichment, &family).ok()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrHeadline {
    pub baseline_auc: f64,
    pub best_auc: f64,
    pub absolute_delta: f64,
    pub relative_delta: f64,
    pub reference_baseline_auc: f64,
    pub reference_best_auc: f64,
    pub reference_relative_delta: f64,
}

fn relative(a: f64, b: f64) -> f64 {
    (b - a) / a
}

/// Final eval AUC of the best run against the baseline on the same eval set.
pub fn ctr_headline(baseline: &RunRecord, best: &RunRecord) -> Result<CtrHeadline> {
    if baseline.eval_digest != best.eval_digest {
        return Err(CoffeeError::Comparability(format!(
            "eval sets differ: {} vs {}",
            baseline.eval_digest, best.eval_digest
        )));
    }
    let (a, b) = (baseline.final_snapshot().auc, best.final_snapshot().auc);
    let (ra, rb) = REFERENCE_CTR_AUC;
    Ok(CtrHeadline {
        baseline_auc: a,
        best_auc: b,
        absolute_delta: b - a,
        relative_delta: relative(a, b),
        reference_baseline_auc: ra,
        reference_best_auc: rb,
        reference_relative_delta: relative(ra, rb),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub sweep_digest: String,
    pub roi: Vec<RoiSummary>,
    pub enrichment: Option<EnrichmentComparison>,
    pub saturation: Vec<SaturationRow>,
    /// Label and length of the run used for the CTR comparison.
    pub best_point: Option<ConfigPoint>,
    pub ctr: Option<CtrHeadline>,
    pub failures: Vec<PointFailure>,
}

impl SweepOutcome {
    /// Best final AUC among enriched ad runs of the first seed, falling back to
    /// any run of that seed when the sweep has no enriched ad runs.
    pub fn best_point<'a>(&'a self) -> Option<&'a PointResult> {
        let seed = self.baselines.first()?.0;
        let better = |best: Option<&'a PointResult>, p: &'a PointResult| match best {
            Some(b) if b.record.final_snapshot().auc >= p.record.final_snapshot().auc => Some(b),
            _ => Some(p),
        };
        let of_seed = self.points.iter().filter(|p| p.point.seed == seed);
        of_seed
            .clone()
            .filter(|p| p.point.enrichment && p.point.sources.contains(&SourceType::AdImpression))
            .fold(None, better)
            .or_else(|| of_seed.fold(None, better))
    }

    pub fn headline(&self) -> Headline {
        let unenriched = ad_curves(&self.points, false);
        let enriched = ad_curves(&self.points, true);
        let best = self.best_point();
        let ctr = best.and_then(|b| ctr_headline(&self.baselines[0].1, &b.record).ok());
        Headline {
            sweep_digest: self.sweep_digest.clone(),
            roi: roi_summary(&self.points),
            enrichment: compare_enrichment(&unenriched, &enriched).ok(),
            saturation: sweep_saturation(&self.points),
            best_point: best.map(|b| b.point.clone()),
            ctr,
            failures: self.failures.clone(),
        }
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("source,enrichment,max_len,seed,capacity_raw,capacity_norm,ne,ne_gain\n");
        for p in &self.points {
            for ((&(x, gain), raw), snap) in p.curve.points.iter().zip(&p.capacity_raw).zip(&p.record.snapshots) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    p.point.label(),
                    p.point.enrichment,
                    p.point.max_len,
                    p.point.seed,
                    raw,
                    x,
                    snap.ne,
                    gain
                )
                .expect("string write");
            }
        }
        out
    }

    /// Table layout: one row per (source, enrichment) family.
    pub fn roi_csv(&self) -> String {
        let mut out = String::from("source,enrichment,curve_auc,slope,points,reference_auc,reference_slope\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in roi_summary(&self.points) {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.source,
                r.enrichment,
                r.curve_auc,
                r.slope,
                r.points,
                opt(r.reference_auc),
                opt(r.reference_slope)
            )
            .expect("string write");
        }
        out
    }

    /// Per-point ROI rows, each computed from its own stored curve.
    pub fn roi_points_csv(&self) -> String {
        let mut out = String::from("source,enrichment,max_len,seed,curve_auc,slope,final_ne,final_auc\n");
        for p in &self.points {
            let last = p.record.final_snapshot();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.roi.source, p.roi.enrichment, p.point.max_len, p.point.seed, p.roi.curve_auc, p.roi.slope, last.ne, last.auc
            )
            .expect("string write");
        }
        out
    }

    pub fn saturation_csv(&self) -> String {
        let mut out = String::from("source,enrichment,from_len,to_len,gain_from,gain_to,marginal_gain,saturating,strictly_decreasing\n");
        for row in sweep_saturation(&self.points) {
            for (i, m) in row.marginal.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    row.source,
                    row.enrichment,
                    row.lengths[i],
                    row.lengths[i + 1],
                    row.gains[i],
                    row.gains[i + 1],
                    m,
                    row.saturating,
                    row.strictly_decreasing
                )
                .expect("string write");
            }
        }
        out
    }

    /// Wall time per run; the only output that varies between identical sweeps.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("source,enrichment,max_len,seed,wall_time_secs\n");
        for (seed, b) in &self.baselines {
            writeln!(out, "none,false,0,{seed},{}", b.wall_time_secs).expect("string write");
        }
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.point.label(),
                p.point.enrichment,
                p.point.max_len,
                p.point.seed,
                p.record.wall_time_secs
            )
            .expect("string write");
        }
        out
    }
}

impl Headline {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("headline serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "sweep {}", self.sweep_digest).expect("string write");
        writeln!(out).expect("string write");
        writeln!(out, "{:<40} {:>6} {:>10} {:>10} {:>9} {:>9}", "source", "enrich", "curve_auc", "slope", "ref_auc", "ref_slope")
            .expect("string write");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for r in &self.roi {
            writeln!(
                out,
                "{:<40} {:>6} {:>10.5} {:>10.5} {:>9} {:>9}",
                r.source,
                r.enrichment,
                r.curve_auc,
                r.slope,
                opt(r.reference_auc),
                opt(r.reference_slope)
            )
            .expect("string write");
        }
        writeln!(out).expect("string write");
        match &self.enrichment {
            Some(e) => writeln!(
                out,
                "enrichment (ad impression): auc ratio {:.3} (reference {:.2}), slope ratio {:.3} (reference {:.2})",
                e.auc_ratio, e.reference_auc_ratio, e.slope_ratio, e.reference_slope_ratio
            ),
            None => writeln!(out, "enrichment: not measured"),
        }
        .expect("string write");
        writeln!(out).expect("string write");
        for s in &self.saturation {
            let marginal: Vec<String> = s.marginal.iter().map(|m| format!("{m:+.5}")).collect();
            writeln!(
                out,
                "saturation {:<30} enrich={:<5} lengths {:?} marginal [{}] saturating={} strict={}",
                s.source,
                s.enrichment,
                s.lengths,
                marginal.join(", "),
                s.saturating,
                s.strictly_decreasing
            )
            .expect("string write");
        }
        writeln!(out).expect("string write");
        match (&self.ctr, &self.best_point) {
            (Some(c), Some(p)) => writeln!(
                out,
                "ctr auc: baseline {:.4} -> {} r={} enrich={} {:.4} (abs {:+.4}, rel {:+.3}%); reference {:.4} -> {:.4} ({:+.3}%)",
                c.baseline_auc,
                p.label(),
                p.max_len,
                p.enrichment,
                c.best_auc,
                c.absolute_delta,
                100.0 * c.relative_delta,
                c.reference_baseline_auc,
                c.reference_best_auc,
                100.0 * c.reference_relative_delta
            ),
            _ => writeln!(out, "ctr auc: not measured"),
        }
        .expect("string write");
        for f in &self.failures {
            writeln!(out, "failed: {} r={} seed={}: {}", f.point.label(), f.point.max_len, f.point.seed, f.error)
                .expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Snapshot;

    fn record(digest: &str, nes: &[f64]) -> RunRecord {
        RunRecord {
            config_digest: "c".into(),
            eval_digest: digest.into(),
            train_examples: 10,
            eval_examples: 5,
            train_prior: 0.5,
            snapshots: nes
                .iter()
                .enumerate()
                .map(|(i, &ne)| Snapshot {
                    step: i,
                    samples: i * 100,
                    ne,
                    auc: 0.5 + 0.01 * i as f64,
                })
                .collect(),
            wall_time_secs: 1.0,
        }
    }

    #[test]
    fn saturation_example() {
        let row = saturation_report("ad_impression", false, &[(50, 0.10), (100, 0.14), (200, 0.15), (400, 0.152)]).unwrap();
        for (m, want) in row.marginal.iter().zip([0.04, 0.01, 0.002]) {
            assert!((m - want).abs() < 1e-12);
        }
        assert!(row.saturating && row.strictly_decreasing);
    }

    #[test]
    fn constant_gains_saturate() {
        let row = saturation_report("x", false, &[(50, 0.2), (100, 0.2), (200, 0.2)]).unwrap();
        assert_eq!(row.marginal, vec![0.0, 0.0]);
        assert!(row.saturating);
        assert!(!row.strictly_decreasing);
        assert!(saturation_report("x", false, &[(50, 0.2), (100, 0.2)]).is_err());
    }

    #[test]
    fn identical_curves_give_unit_ratios() {
        let c = ScalingCurve::new("ad_impression", false, vec![(0.0, 0.0), (0.5, 0.1), (1.0, 0.3)]).unwrap();
        let cmp = compare_enrichment(std::slice::from_ref(&c), std::slice::from_ref(&c)).unwrap();
        assert_eq!(cmp.auc_ratio, 1.0);
        assert_eq!(cmp.slope_ratio, 1.0);
        assert_eq!(cmp.reference_auc_ratio, 1.56);
        assert!(compare_enrichment(&[], &[c]).is_err());
    }

    #[test]
    fn ctr_headline_reference_and_identity() {
        let a = record("e", &[1.0, 0.9]);
        let h = ctr_headline(&a, &a).unwrap();
        assert_eq!(h.absolute_delta, 0.0);
        assert_eq!(h.relative_delta, 0.0);
        assert!((100.0 * h.reference_relative_delta - 0.565).abs() < 1e-3);
        let b = record("other", &[1.0, 0.9]);
        assert!(matches!(ctr_headline(&a, &b), Err(CoffeeError::Comparability(_))));
    }

    #[test]
    fn curves_use_matched_snapshots() {
        let base = record("e", &[1.0, 0.99, 0.98]);
        let run = record("e", &[1.0, 0.9, 0.8]);
        let (curve, raw) = scaling_curve("ad_impression", false, &base, &run).unwrap();
        assert_eq!(raw, vec![0, 100, 200]);
        assert_eq!(curve.points[0], (0.0, 0.0));
        assert!((curve.points[2].1 - (0.98 - 0.8) / 0.98).abs() < 1e-15);
        let roi = RoiRow::from_curve(&curve).unwrap();
        assert_eq!(roi.curve_auc, curve_auc(&curve).unwrap());
        assert!(scaling_curve("x", false, &base, &record("e", &[1.0, 0.9])).is_err());
        assert!(scaling_curve("x", false, &base, &record("f", &[1.0, 0.9, 0.8])).is_err());
    }

    #[test]
    fn sweep_config_validation_and_points() {
        let cfg = SweepConfig::default();
        cfg.validate().unwrap();
        // 3 sources x 4 lengths unenriched, plus 4 enriched ad points
        assert_eq!(cfg.points().len(), 16);
        let parsed = SweepConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(parsed, cfg);
        let bad = |edit: fn(&mut SweepConfig)| {
            let mut c = SweepConfig::default();
            edit(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lengths = vec![100, 50]));
        assert!(bad(|c| c.lengths.clear()));
        assert!(bad(|c| c.sources = vec![vec![]]));
        assert!(bad(|c| c.seeds = vec![1, 1]));
        assert!(bad(|c| c.workers = 0));
        assert!(SweepConfig::from_toml_str("bogus = 1").is_err());
        let mut w = cfg.clone();
        w.workers = 4;
        assert_eq!(w.digest(), cfg.digest());
    }

    fn tiny_sweep() -> SweepConfig {
        let mut world = WorldConfig::default();
        world.users = 40;
        world.contents = 120;
        world.ads = 30;
        world.authors = 10;
        world.requests_per_user = 6;
        world.horizon_days = 12;
        world.activity_rate = 6.0;
        world.codebook_size = 8;
        SweepConfig {
            sources: vec![vec![SourceType::AdImpression]],
            lengths: vec![10],
            enrichment: vec![false],
            seeds: vec![3],
            workers: 1,
            world,
            train: TrainConfig {
                epochs: 1,
                batch_size: 32,
                snapshots: 2,
                ..TrainConfig::default()
            },
            model: ModelSettings {
                hidden: vec![4],
                ..ModelSettings::default()
            },
        }
    }

    #[test]
    fn single_point_sweep_and_cache() {
        let sweep = tiny_sweep();
        let dir = tempfile::tempdir().unwrap();
        let first = run_sweep(&sweep, Some(dir.path()), &|_| {}).unwrap();
        assert_eq!(first.points.len(), 1);
        assert_eq!(first.baselines.len(), 1);
        assert!(first.failures.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
        let second = run_sweep(&sweep, Some(dir.path()), &|_| {}).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.curves_csv(), second.curves_csv());
        let uncached = run_sweep(&sweep, None, &|_| {}).unwrap();
        assert_eq!(first.curves_csv(), uncached.curves_csv());
        assert_eq!(first.headline().to_json(), uncached.headline().to_json());
        let p = &first.points[0];
        assert_eq!(p.roi.curve_auc, curve_auc(&p.curve).unwrap());
        assert_eq!(p.roi.slope, best_fit_slope(&p.curve).unwrap());
    }
}
