//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use coffee_core::enrichment::{enrich_event, knn_query, train_codebook_traced, KnnIndex};
use coffee_core::event::{read_event_log, validate_event, AttributeValue, SourceSchema, SourceType};
use coffee_core::gradcheck::{kernel_checks, model_check, sabotaged_kernel_checks, sabotaged_model_check};
use coffee_core::metrics::{best_fit_slope, curve_auc, normalized_entropy, roc_auc, EvalBatch, ScalingCurve};
use coffee_core::numeric::Matrix;
use coffee_core::rng::substream;
use coffee_core::world::World;
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    let detail = detail.into();
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, outcome: Outcome) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(d) if secs < limit_secs as f64 => Ok(format!("{d}; {secs:.1}s < {limit_secs}s")),
        Ok(d) => Err(format!("{d}; but took {secs:.1}s, limit {limit_secs}s")),
        Err(d) => Err(format!("{d}; {secs:.1}s")),
    }
}

struct Cli {
    bin: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<(), String> {
        let output = Command::new(&self.bin)
            .args(args)
            .output()
            .map_err(|e| format!("spawn coffee: {e}"))?;
        if output.status.success() {
            Ok(())
        } else {
            Err(format!(
                "`coffee {}` exited with {:?}: {}",
                args.join(" "),
                output.status.code(),
                String::from_utf8_lossy(&output.stderr).lines().last().unwrap_or("")
            ))
        }
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn random_batch(rng: &mut impl Rng, max_n: usize, tied: bool) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=max_n);
    let preds: Vec<f64> = (0..n)
        .map(|_| {
            if tied {
                f64::from(rng.random_range(0..6u8)) / 5.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    let mut labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    (preds, labels)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = substream(1, "acceptance-ne");
    let mut worst: f64 = 0.0;
    let mut worst_prior: f64 = 0.0;
    for b in 0..1000 {
        let (preds, labels) = random_batch(&mut rng, 100, b % 2 == 0);
        let n = labels.len() as f64;
        let prior = labels.iter().sum::<f64>() / n;
        let mut loss = 0.0;
        for (&p, &y) in preds.iter().zip(&labels) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            loss += -(y * p.ln()) - (1.0 - y) * (1.0 - p).ln();
        }
        let oracle = (loss / n) / (-(prior * prior.ln()) - (1.0 - prior) * (1.0 - prior).ln());
        let ne = normalized_entropy(&EvalBatch::new(preds, labels.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max((ne - oracle).abs());
        let constant = normalized_entropy(&EvalBatch::new(vec![prior; labels.len()], labels).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst_prior = worst_prior.max((constant - 1.0).abs());
    }
    within(
        started.elapsed(),
        5,
        check(
            worst <= 1e-9 && worst_prior <= 1e-12,
            format!("max |NE - oracle| {worst:.2e}, max |NE(prior) - 1| {worst_prior:.2e} over 1000 batches"),
        ),
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = substream(2, "acceptance-auc");
    let mut worst: f64 = 0.0;
    for b in 0..1000 {
        let (preds, labels) = random_batch(&mut rng, 200, b % 2 == 0);
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..preds.len()).filter(|&i| labels[i] == 1.0) {
            for j in (0..preds.len()).filter(|&j| labels[j] == 0.0) {
                pairs += 1.0;
                if preds[i] > preds[j] {
                    wins += 1.0;
                } else if preds[i] == preds[j] {
                    wins += 0.5;
                }
            }
        }
        let auc = roc_auc(&EvalBatch::new(preds, labels).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max((auc - wins / pairs).abs());
    }
    within(
        started.elapsed(),
        10,
        check(worst <= 1e-12, format!("max |AUC - pairwise| {worst:.2e} over 1000 batches, half with ties")),
    )
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for c in kernel_checks(3) {
        ok &= c.report.passed();
        details.push(format!("{} {:.1e}", c.name, c.report.max_rel_err));
    }
    let model = model_check(3).map_err(|e| e.to_string())?;
    ok &= model.passed();
    details.push(format!("model {:.1e}", model.max_rel_err));
    let caught = sabotaged_kernel_checks(3).iter().filter(|c| !c.report.passed()).count();
    let model_caught = !sabotaged_model_check(3).map_err(|e| e.to_string())?.passed();
    ok &= caught == 4 && model_caught;
    details.push(format!("sabotage caught {}/5", caught + usize::from(model_caught)));
    within(started.elapsed(), 30, check(ok, details.join(", ")))
}

fn criterion_4() -> Outcome {
    let line = |pts: Vec<(f64, f64)>| ScalingCurve::new("c", false, pts).map_err(|e| e.to_string());
    let doubled = line((0..=10).map(|i| (f64::from(i) / 10.0, 2.0 * f64::from(i) / 10.0)).collect())?;
    let auc = curve_auc(&doubled).map_err(|e| e.to_string())?;
    let collinear = line(vec![(0.0, 1.0), (0.3, 1.6), (0.5, 2.0), (1.0, 3.0)])?;
    let slope = best_fit_slope(&collinear).map_err(|e| e.to_string())?;
    let mut rng = substream(4, "acceptance-curves");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..12usize);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs[0] = 0.0;
        xs[n - 1] = 1.0;
        let ya: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yb: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let curve = |ys: Vec<f64>| line(xs.iter().copied().zip(ys).collect());
        let combo = curve(ya.iter().zip(&yb).map(|(u, v)| a * u + b * v).collect())?;
        let (ca, cb) = (curve(ya.clone())?, curve(yb.clone())?);
        let lhs = curve_auc(&combo).map_err(|e| e.to_string())?;
        let rhs = a * curve_auc(&ca).map_err(|e| e.to_string())? + b * curve_auc(&cb).map_err(|e| e.to_string())?;
        worst = worst.max((lhs - rhs).abs());
        let slhs = best_fit_slope(&combo).map_err(|e| e.to_string())?;
        let srhs = a * best_fit_slope(&ca).map_err(|e| e.to_string())? + b * best_fit_slope(&cb).map_err(|e| e.to_string())?;
        worst = worst.max((slhs - srhs).abs() / srhs.abs().max(1.0));
    }
    check(
        (auc - 1.0).abs() <= 1e-12 && (slope - 2.0).abs() <= 1e-12 && worst <= 1e-9,
        format!("AUC(y=2x) {auc}, slope {slope}, linearity residual {worst:.1e}"),
    )
}

/// Criteria 5 to 7 read the same default sweep at seed 42.
fn default_sweep(cli: &Cli, root: &Path) -> Result<(Value, Duration), String> {
    let out = root.join("sweep");
    let started = Instant::now();
    cli.run(&["sweep", "--seed", "42", "--out", p(&out)])?;
    Ok((read_json(&out.join("headline.json"))?, started.elapsed()))
}

fn roi_auc(headline: &Value, source: &str, enrichment: bool) -> Option<f64> {
    headline["roi"]
        .as_array()?
        .iter()
        .find(|r| r["source"] == source && r["enrichment"] == enrichment)?["curve_auc"]
        .as_f64()
}

fn criterion_5(sweep: &Result<(Value, Duration), String>) -> Outcome {
    let (h, elapsed) = sweep.as_ref().map_err(Clone::clone)?;
    let get = |s: &str, e: bool| roi_auc(h, s, e).ok_or_else(|| format!("no ROI row for {s} enrichment={e}"));
    let ad = get("ad_impression", false)?;
    let organic = get("organic_impression", false)?;
    let video = get("video_view", false)?;
    let ratio = h["enrichment"]["auc_ratio"].as_f64().ok_or("no enrichment comparison")?;
    within(
        *elapsed,
        600,
        check(
            ad > organic && organic > video && ratio > 1.0,
            format!("curve AUC ad {ad:.4} > organic {organic:.4} > video {video:.4}; enriched/unenriched {ratio:.3}"),
        ),
    )
}

fn criterion_6(sweep: &Result<(Value, Duration), String>) -> Outcome {
    let (h, _) = sweep.as_ref().map_err(Clone::clone)?;
    let row = h["saturation"]
        .as_array()
        .and_then(|rows| rows.iter().find(|r| r["source"] == "ad_impression" && r["enrichment"] == false))
        .ok_or("no ad-impression saturation row")?;
    let lengths: Vec<u64> = row["lengths"].as_array().ok_or("no lengths")?.iter().filter_map(Value::as_u64).collect();
    let marginal: Vec<f64> = row["marginal"].as_array().ok_or("no marginals")?.iter().filter_map(Value::as_f64).collect();
    let strict = marginal.windows(2).all(|w| w[1] < w[0]);
    check(
        lengths == [50, 100, 200, 400] && marginal.len() == 3 && strict,
        format!("marginal gains per doubling {marginal:+.5?}"),
    )
}

fn criterion_7(sweep: &Result<(Value, Duration), String>) -> Outcome {
    let (h, _) = sweep.as_ref().map_err(Clone::clone)?;
    let ctr = &h["ctr"];
    let base = ctr["baseline_auc"].as_f64().ok_or("no CTR headline")?;
    let best = ctr["best_auc"].as_f64().ok_or("no CTR headline")?;
    let enriched_ad = h["best_point"]["enrichment"] == true
        && h["best_point"]["sources"]
            .as_array()
            .is_some_and(|s| s.iter().any(|x| x == "ad_impression"));
    check(
        enriched_ad && best - base >= 0.02,
        format!("eval AUC baseline {base:.4} -> best enriched ad {best:.4} (+{:.4})", best - base),
    )
}

fn criterion_8(cli: &Cli, root: &Path) -> Outcome {
    let dir = root.join("lift");
    let world = dir.join("world");
    let model = dir.join("model");
    let report = dir.join("explain");
    cli.run(&["gen-world", "--seed", "42", "--out", p(&world)])?;
    let world_file = world.join("world.jsonl");
    cli.run(&["train", "--world", p(&world_file), "--seed", "42", "--out", p(&model)])?;
    cli.run(&[
        "explain",
        "--world",
        p(&world_file),
        "--checkpoint",
        p(&model),
        "--seed",
        "42",
        "--lift-pairs",
        "1000",
        "--out",
        p(&report),
    ])?;
    let lift = read_json(&report.join("lift.json"))?;
    let trained = lift["trained"]["lift"].as_f64().ok_or("no trained lift")?;
    let untrained = lift["untrained"]["lift"].as_f64().ok_or("no untrained lift")?;
    check(
        trained > 1.2 && (untrained - 1.0).abs() <= 0.1,
        format!("attention lift trained {trained:.3}, untrained {untrained:.3}"),
    )
}

/// Every file under `dir` except wall-time reports and the result cache.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if path.is_dir() {
                if name != "cache" {
                    stack.push(path);
                }
            } else if name != "timings.csv" {
                let rel = path.strip_prefix(dir).map_err(|e| e.to_string())?.display().to_string();
                files.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn criterion_9(cli: &Cli, root: &Path) -> Outcome {
    let base = root.join("determinism");
    fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    let world_cfg = base.join("world.toml");
    fs::write(&world_cfg, "users = 120\nrequests_per_user = 15\ncontents = 400\nads = 120\ncodebook_size = 32\n")
        .map_err(|e| e.to_string())?;
    let train_cfg = base.join("train.toml");
    fs::write(&train_cfg, "[model]\nmax_len = 30\nenrichment = true\n[train]\nepochs = 1\nsnapshots = 2\n")
        .map_err(|e| e.to_string())?;
    let manifest = base.join("sweep.toml");
    fs::write(
        &manifest,
        "sources = [[\"ad_impression\"], [\"video_view\"]]\nlengths = [10, 20]\nseeds = [5]\n\
         [world]\nusers = 120\nrequests_per_user = 15\ncontents = 400\nads = 120\ncodebook_size = 32\n\
         [train]\nepochs = 1\nsnapshots = 2\n",
    )
    .map_err(|e| e.to_string())?;

    for round in ["a", "b"] {
        let r = base.join(round);
        let world = r.join("gen-world");
        let wf = world.join("world.jsonl");
        let sim = r.join("simulate");
        let events = sim.join("events.jsonl");
        let examples = sim.join("examples.jsonl");
        let model = r.join("train");
        cli.run(&["gen-world", "--config", p(&world_cfg), "--seed", "7", "--out", p(&world)])?;
        cli.run(&["simulate", "--world", p(&wf), "--seed", "7", "--out", p(&sim)])?;
        cli.run(&["enrich", "--world", p(&wf), "--events", p(&events), "--seed", "7", "--out", p(&r.join("enrich"))])?;
        let data = ["--world", p(&wf), "--events", p(&events), "--examples", p(&examples)];
        cli.run(&[&["train", "--config", p(&train_cfg), "--seed", "7", "--out", p(&model)], &data[..]].concat())?;
        cli.run(&[&["eval", "--checkpoint", p(&model), "--seed", "7", "--out", p(&r.join("eval"))], &data[..]].concat())?;
        cli.run(
            &[
                &["explain", "--checkpoint", p(&model), "--seed", "7", "--lift-pairs", "150", "--out", p(&r.join("explain"))],
                &data[..],
            ]
            .concat(),
        )?;
        cli.run(&["sweep", "--manifest", p(&manifest), "--workers", "2", "--seed", "7", "--out", p(&r.join("sweep"))])?;
        cli.run(&["report", "--run", p(&r.join("sweep")), "--seed", "7", "--out", p(&r.join("report"))])?;
    }
    let a = snapshot(&base.join("a"))?;
    let b = snapshot(&base.join("b"))?;
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let expected = [
        "gen-world/world.jsonl",
        "simulate/events.jsonl",
        "enrich/events.jsonl",
        "train/model.cof",
        "eval/eval.json",
        "explain/lift.json",
        "sweep/curves.csv",
        "sweep/headline.json",
        "report/roi.csv",
    ];
    let missing: Vec<&str> = expected.iter().copied().filter(|f| !a.contains_key(*f)).collect();
    check(
        differing.is_empty() && missing.is_empty() && a.len() == b.len(),
        format!(
            "{} output files across 8 commands byte-identical on rerun; differing {differing:?}; missing {missing:?}",
            a.len()
        ),
    )
}

fn criterion_10(cli: &Cli, root: &Path) -> Outcome {
    let mut rng = substream(10, "acceptance-knn");
    let mut mismatches = 0;
    for _ in 0..20 {
        let m = rng.random_range(1..=1000usize);
        let dim = rng.random_range(1..8usize);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dim).map(|_| f64::from(rng.random_range(-3..=3i8)) / 2.0).collect())
            .collect();
        let index = KnnIndex::new(Matrix::from_rows(&rows).map_err(|e| e.to_string())?, (0..m).collect())
            .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k = rng.random_range(1..=m.min(10));
            let mut all: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let brute: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            if knn_query(&index, &q, k).map_err(|e| e.to_string())? != brute {
                mismatches += 1;
            }
        }
    }

    let mut non_monotone = 0;
    for seed in 0..10u64 {
        let mut r = substream(seed, "acceptance-lloyd");
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let m = Matrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let (_, trace) = train_codebook_traced(&m, 8, 20, seed).map_err(|e| e.to_string())?;
        if trace.len() != 21 || trace.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
    }

    let dir = root.join("enrich");
    let world_dir = dir.join("world");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let world_cfg = dir.join("world.toml");
    fs::write(&world_cfg, "users = 150\nrequests_per_user = 5\nads = 300\ncodebook_size = 64\n").map_err(|e| e.to_string())?;
    cli.run(&["gen-world", "--config", p(&world_cfg), "--seed", "10", "--out", p(&world_dir)])?;
    let wf = world_dir.join("world.jsonl");
    cli.run(&["enrich", "--world", p(&wf), "--seed", "10", "--out", p(&dir.join("out"))])?;
    let world = World::load(&wf).map_err(|e| e.to_string())?;
    let vocab = world.vocab();
    let events = read_event_log(&dir.join("out/events.jsonl")).map_err(|e| e.to_string())?;
    let mut invalid = 0;
    let mut enriched = 0;
    let mut over_cap = 0;
    for e in &events {
        let schema = if e.is_enriched() {
            enriched += 1;
            SourceSchema::enriched(e.source, &vocab)
        } else {
            SourceSchema::new(e.source, &vocab)
        };
        invalid += usize::from(!validate_event(e, &schema).is_empty());
        over_cap += usize::from(e.attributes.len() > 10);
    }
    let ad_events = events.iter().filter(|e| e.source == SourceType::AdImpression).count();
    let mut full = events
        .iter()
        .find(|e| e.source == SourceType::AdImpression && !e.is_enriched())
        .or_else(|| events.iter().find(|e| e.source == SourceType::AdImpression))
        .cloned()
        .ok_or("no ad impressions")?;
    full.attributes.truncate(3);
    full.attributes.resize(10, AttributeValue::Categorical(0));
    let codebook = coffee_core::enrichment::train_codebook(
        &Matrix::from_rows(&world.ads.iter().map(|a| a.content_embedding.clone()).collect::<Vec<_>>())
            .map_err(|e| e.to_string())?,
        4,
        5,
        1,
    )
    .map_err(|e| e.to_string())?;
    let budget_guarded = enrich_event(&full, &world.ad_index().map_err(|e| e.to_string())?, &codebook, 3).is_err();

    check(
        mismatches == 0 && non_monotone == 0 && invalid == 0 && over_cap == 0 && enriched == ad_events && budget_guarded,
        format!(
            "k-NN mismatches {mismatches}/200, non-monotone WCSS {non_monotone}/10, \
             {enriched} enriched events with {invalid} schema violations and {over_cap} over the 10-attribute cap, \
             full event rejected: {budget_guarded}"
        ),
    )
}

fn main() {
    let cli = Cli {
        bin: PathBuf::from(env!("CARGO_BIN_EXE_coffee")),
    };
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "NE oracle equivalence", criterion_1()),
        (2, "ROC AUC oracle equivalence", criterion_2()),
        (3, "gradient correctness", criterion_3()),
        (4, "curve statistics", criterion_4()),
    ];
    let sweep = default_sweep(&cli, root);
    results.push((5, "planted ROI ordering", criterion_5(&sweep)));
    results.push((6, "ad-impression saturation", criterion_6(&sweep)));
    results.push((7, "CTR improvement", criterion_7(&sweep)));
    results.push((8, "explainability lift", criterion_8(&cli, root)));
    results.push((9, "end-to-end determinism", criterion_9(&cli, root)));
    results.push((10, "enrichment correctness", criterion_10(&cli, root)));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
