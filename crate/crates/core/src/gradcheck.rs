//! Finite-difference verification of every hand-written backward pass, on
//! seeded toy instances. The sabotaged variants scale one analytic gradient
//! by `1 + SABOTAGE_SCALE` and must be caught by the same checker.

use rand::Rng;

use crate::error::Result;
use crate::event::SourceType;
use crate::model::{Candidate, ModelConfig, PerSource, SequenceModel};
use crate::numeric::{
    attention_backward, embedding_backward, embedding_lookup, grad_check, linear_backward, linear_forward,
    scaled_dot_attention, sigmoid, sigmoid_bce, sigmoid_bce_grad, GradCheckReport, Matrix, ParamId, ParamStore,
};
use crate::rng::substream;
use crate::trainer::{build_sequences, prepare_histories};
use crate::world::{generate_world, Dataset, WorldConfig};

pub const KERNEL_TOLERANCE: f64 = 1e-6;
pub const ATTENTION_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const SABOTAGE_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

fn weighted_sum(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn add_into(store: &mut ParamStore, id: ParamId, g: &[f64], scale: f64) {
    for (dst, x) in store.grad_mut(id).data_mut().iter_mut().zip(g) {
        *dst += scale * x;
    }
}

fn linear_check(seed: u64, sabotage: bool) -> KernelCheck {
    let mut rng = substream(seed, "check-linear");
    let upstream = random(3, 5, &mut rng);
    let mut store = ParamStore::new();
    let x = store.add("x", random(3, 4, &mut rng));
    let w = store.add("w", random(4, 5, &mut rng));
    let b = store.add("b", random(1, 5, &mut rng));
    let bad = if sabotage { 1.0 + SABOTAGE_SCALE } else { 1.0 };
    let report = grad_check(
        &mut store,
        |st| {
            let y = linear_forward(st.value(x), st.value(w), st.value(b).data()).expect("shapes agree");
            let g = linear_backward(st.value(x), st.value(w), &upstream).expect("shapes agree");
            add_into(st, x, g.dx.data(), 1.0);
            add_into(st, w, g.dw.data(), bad);
            add_into(st, b, &g.db, 1.0);
            weighted_sum(&y, &upstream)
        },
        usize::MAX,
        KERNEL_TOLERANCE,
        seed,
    );
    KernelCheck { name: "linear", report }
}

fn embedding_check(seed: u64, sabotage: bool) -> KernelCheck {
    let mut rng = substream(seed, "check-embedding");
    let ids = [0, 2, 2, 5, 1];
    let upstream = random(ids.len(), 3, &mut rng);
    let mut store = ParamStore::new();
    let table = store.add("table", random(6, 3, &mut rng));
    let bad = if sabotage { 1.0 + SABOTAGE_SCALE } else { 1.0 };
    let report = grad_check(
        &mut store,
        |st| {
            let rows = embedding_lookup(st.value(table), &ids).expect("ids in range");
            let mut g = Matrix::zeros(6, 3);
            embedding_backward(&mut g, &ids, &upstream).expect("ids in range");
            add_into(st, table, g.data(), bad);
            weighted_sum(&rows, &upstream)
        },
        usize::MAX,
        KERNEL_TOLERANCE,
        seed,
    );
    KernelCheck { name: "embedding", report }
}

fn attention_check(seed: u64, sabotage: bool) -> KernelCheck {
    let mut rng = substream(seed, "check-attention");
    let upstream = random(1, 3, &mut rng);
    let mut store = ParamStore::new();
    let q = store.add("q", random(1, 4, &mut rng));
    let k = store.add("k", random(5, 4, &mut rng));
    let v = store.add("v", random(5, 3, &mut rng));
    let bad = if sabotage { 1.0 + SABOTAGE_SCALE } else { 1.0 };
    let report = grad_check(
        &mut store,
        |st| {
            let att = scaled_dot_attention(st.value(q).data(), st.value(k), st.value(v)).expect("non-empty");
            let g = attention_backward(st.value(q).data(), st.value(k), st.value(v), &att.weights, upstream.data())
                .expect("shapes agree");
            add_into(st, q, &g.dq, 1.0);
            add_into(st, k, g.dk.data(), bad);
            add_into(st, v, g.dv.data(), 1.0);
            att.context.iter().zip(upstream.data()).map(|(c, u)| c * u).sum()
        },
        usize::MAX,
        ATTENTION_TOLERANCE,
        seed,
    );
    KernelCheck { name: "attention", report }
}

fn bce_check(seed: u64, sabotage: bool) -> KernelCheck {
    let mut rng = substream(seed, "check-bce");
    let labels: Vec<f64> = (0..6).map(|i| f64::from(i % 2)).collect();
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(1, labels.len(), &mut rng));
    let bad = if sabotage { 1.0 + SABOTAGE_SCALE } else { 1.0 };
    let report = grad_check(
        &mut store,
        |st| {
            let z = st.value(logits).data().to_vec();
            let g: Vec<f64> = z.iter().zip(&labels).map(|(&z, &y)| sigmoid_bce_grad(sigmoid(z), y)).collect();
            add_into(st, logits, &g, bad);
            z.iter().zip(&labels).map(|(&z, &y)| sigmoid_bce(z, y).1).sum()
        },
        usize::MAX,
        KERNEL_TOLERANCE,
        seed,
    );
    KernelCheck { name: "sigmoid_bce", report }
}

/// Every kernel checked against central differences.
pub fn kernel_checks(seed: u64) -> Vec<KernelCheck> {
    vec![
        linear_check(seed, false),
        embedding_check(seed, false),
        attention_check(seed, false),
        bce_check(seed, false),
    ]
}

/// The same checks with one gradient per kernel deliberately wrong; every
/// report should fail.
pub fn sabotaged_kernel_checks(seed: u64) -> Vec<KernelCheck> {
    vec![
        linear_check(seed, true),
        embedding_check(seed, true),
        attention_check(seed, true),
        bce_check(seed, true),
    ]
}

/// A few labelled requests from a tiny world, run through a small model with
/// every source and the enrichment attribute enabled.
fn model_check_inner(seed: u64, sabotage: bool) -> Result<GradCheckReport> {
    let world_cfg = WorldConfig {
        users: 6,
        contents: 40,
        ads: 12,
        authors: 5,
        topics: 3,
        codebook_size: 4,
        requests_per_user: 2,
        horizon_days: 10,
        warmup_days: 4,
        activity_rate: 4.0,
        ..WorldConfig::default()
    };
    let world = generate_world(&world_cfg, seed)?;
    let data = Dataset::simulate(&world)?;
    let mut cfg = ModelConfig::new(world.vocab());
    cfg.attr_dim = 3;
    cfg.event_dim = 4;
    cfg.time_dim = 4;
    cfg.attn_dim = 3;
    cfg.hidden = vec![5, 3];
    cfg.max_len = PerSource::splat(6);
    cfg.enrichment = true;
    cfg.enrichment_k = 3;
    let histories = prepare_histories(&world, &data.histories, &cfg)?;
    let (model, mut store) = SequenceModel::init(cfg.clone(), seed)?;
    let cases: Vec<_> = data
        .examples
        .iter()
        .take(4)
        .map(|ex| (build_sequences(&histories, &cfg, ex.user_id, ex.timestamp), *ex))
        .collect();
    let target = store
        .id(&format!("{}.key.w", SourceType::AdImpression.tag()))
        .expect("ad-impression key weights exist");
    let report = grad_check(
        &mut store,
        |st| {
            let mut loss = 0.0;
            for (seqs, ex) in &cases {
                let cand = Candidate {
                    ad_id: ex.ad_id,
                    content_embedding: &world.ads[ex.ad_id].content_embedding,
                };
                loss += model
                    .forward_backward(st, seqs, cand, ex.timestamp, f64::from(ex.label))
                    .expect("valid toy instance")
                    .1;
            }
            if sabotage {
                st.grad_mut(target).data_mut().iter_mut().for_each(|g| *g *= 1.0 + SABOTAGE_SCALE);
            }
            loss
        },
        24,
        MODEL_TOLERANCE,
        seed,
    );
    Ok(report)
}

/// Full-model analytic gradient against central differences.
pub fn model_check(seed: u64) -> Result<GradCheckReport> {
    model_check_inner(seed, false)
}

/// As [`model_check`] with one parameter's gradient scaled; should fail.
pub fn sabotaged_model_check(seed: u64) -> Result<GradCheckReport> {
    model_check_inner(seed, true)
}
