//! Dense f64 kernels with hand-written backward passes, a named parameter
//! store with Adam state, and a finite-difference gradient checker.
//!
//! Kernels come in two flavours: `Matrix`-level functions that check shapes and
//! allocate their outputs, and slice-level `*_into` / `*_accumulate` variants the
//! sequence model calls in its inner loops.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoffeeError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoffeeError::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out = x·W (+ b)` for a single row `x` of length `W.rows()`.
#[inline]
pub fn affine_into(x: &[f64], w: &Matrix, b: Option<&[f64]>, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
    for (xi, wrow) in x.iter().zip(w.data.chunks_exact(w.cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(wrow) {
            *o += xi * wij;
        }
    }
}

/// Accumulates the gradients of `y = x·W + b` given `dy`:
/// `dx += W·dy`, `dW += xᵀ·dy`, `db += dy`.
#[inline]
pub fn affine_backward_accumulate(
    x: &[f64],
    w: &Matrix,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut Matrix,
    db: Option<&mut [f64]>,
) {
    debug_assert_eq!(dy.len(), w.cols);
    if let Some(dx) = dx {
        for (dxi, wrow) in dx.iter_mut().zip(w.data.chunks_exact(w.cols)) {
            *dxi += wrow.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    for (xi, dwrow) in x.iter().zip(dw.data.chunks_exact_mut(w.cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (g, d) in dwrow.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(db) = db {
        for (g, d) in db.iter_mut().zip(dy) {
            *g += d;
        }
    }
}

pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols != w.rows || b.len() != w.cols {
        return Err(CoffeeError::Dimension(format!(
            "linear: x {:?}, W {:?}, b {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = Matrix::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        let (xi, yi) = (x.row(i), &mut y.data[i * w.cols..(i + 1) * w.cols]);
        affine_into(xi, w, Some(b), yi);
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, upstream: &Matrix) -> Result<LinearGrads> {
    if x.cols != w.rows || upstream.rows != x.rows || upstream.cols != w.cols {
        return Err(CoffeeError::Dimension(format!(
            "linear backward: x {:?}, W {:?}, upstream {:?}",
            x.shape(),
            w.shape(),
            upstream.shape()
        )));
    }
    let mut grads = LinearGrads {
        dx: Matrix::zeros(x.rows, x.cols),
        dw: Matrix::zeros(w.rows, w.cols),
        db: vec![0.0; w.cols],
    };
    for i in 0..x.rows {
        let dxi = &mut grads.dx.data[i * x.cols..(i + 1) * x.cols];
        affine_backward_accumulate(
            x.row(i),
            w,
            upstream.row(i),
            Some(dxi),
            &mut grads.dw,
            Some(&mut grads.db),
        );
    }
    Ok(grads)
}

pub fn embedding_lookup(table: &Matrix, ids: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.rows {
            return Err(CoffeeError::OutOfRange {
                id,
                size: table.rows,
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatters upstream rows into the table gradient; duplicate ids add up.
pub fn embedding_backward(table_grad: &mut Matrix, ids: &[usize], upstream: &Matrix) -> Result<()> {
    if upstream.rows != ids.len() || upstream.cols != table_grad.cols {
        return Err(CoffeeError::Dimension(format!(
            "embedding backward: {} ids, upstream {:?}, table {:?}",
            ids.len(),
            upstream.shape(),
            table_grad.shape()
        )));
    }
    for (i, &id) in ids.iter().enumerate() {
        if id >= table_grad.rows {
            return Err(CoffeeError::OutOfRange {
                id,
                size: table_grad.rows,
            });
        }
        for (g, u) in table_grad.row_mut(id).iter_mut().zip(upstream.row(i)) {
            *g += u;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Softmax in place, shifted by the maximum for stability.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Single-query attention: `weights = softmax(q·Kᵀ/√d)`, `context = weights·V`.
pub fn scaled_dot_attention(q: &[f64], k: &Matrix, v: &Matrix) -> Result<Attention> {
    if k.rows == 0 {
        return Err(CoffeeError::EmptySequence);
    }
    if q.len() != k.cols || k.rows != v.rows {
        return Err(CoffeeError::Dimension(format!(
            "attention: q {}, K {:?}, V {:?}",
            q.len(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (k.cols as f64).sqrt();
    let mut weights: Vec<f64> = (0..k.rows)
        .map(|i| dot(q, k.row(i)) * scale)
        .collect();
    softmax_in_place(&mut weights);
    let mut context = vec![0.0; v.cols];
    for (w, vrow) in weights.iter().zip(v.data.chunks_exact(v.cols)) {
        for (c, x) in context.iter_mut().zip(vrow) {
            *c += w * x;
        }
    }
    Ok(Attention { context, weights })
}

pub fn attention_backward(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    dcontext: &[f64],
) -> Result<AttentionGrads> {
    if k.rows == 0 {
        return Err(CoffeeError::EmptySequence);
    }
    if dcontext.len() != v.cols || weights.len() != k.rows {
        return Err(CoffeeError::Dimension("attention backward shapes".into()));
    }
    let scale = 1.0 / (k.cols as f64).sqrt();
    let mut dv = Matrix::zeros(v.rows, v.cols);
    // dL/dw_i = dcontext·v_i
    let dw: Vec<f64> = (0..v.rows).map(|i| dot(dcontext, v.row(i))).collect();
    for (i, &w) in weights.iter().enumerate() {
        for (g, d) in dv.row_mut(i).iter_mut().zip(dcontext) {
            *g = w * d;
        }
    }
    let mean: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
    let mut dq = vec![0.0; q.len()];
    let mut dk = Matrix::zeros(k.rows, k.cols);
    for i in 0..k.rows {
        let ds = weights[i] * (dw[i] - mean) * scale;
        for (g, kij) in dq.iter_mut().zip(k.row(i)) {
            *g += ds * kij;
        }
        for (g, qj) in dk.row_mut(i).iter_mut().zip(q) {
            *g = ds * qj;
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Returns `(p, loss)` for a logit and a 0/1 label, using the logit form of
/// binary cross-entropy so neither term overflows.
pub fn sigmoid_bce(logit: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (p, loss)
}

/// `dloss/dlogit` of [`sigmoid_bce`].
pub fn sigmoid_bce_grad(p: f64, label: f64) -> f64 {
    p - label
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient accumulator shaped like a store's parameters, so forward passes
/// can borrow the store immutably while gradients are collected elsewhere.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let (r, c) = value.shape();
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    /// Parameter value and gradient buffer of the same entry, borrowed together.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Matrix, &mut Matrix) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// A zeroed gradient buffer matching every registered parameter.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }

    /// Adds a buffer's contents into the stored gradients.
    pub fn accumulate_grads(&mut self, buffer: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            p.grad.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
        }
    }

    /// Applies one bias-corrected Adam update and zeroes the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(bad) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(CoffeeError::PoisonedGradient(bad.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let it = p
                .value
                .data
                .iter_mut()
                .zip(p.grad.data.iter_mut())
                .zip(p.first_moment.data.iter_mut().zip(p.second_moment.data.iter_mut()));
            for ((w, g), (m, v)) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }

    /// Sum of every gradient entry's square, for diagnostics.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        cof1::write_magic(&mut out);
        let values: Vec<(&str, &Matrix)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        cof1::write_section(&mut out, *b"PARM", &values);
        let step = Matrix::row_vector(&[self.step as f64]);
        let mut adam: Vec<(String, &Matrix)> = vec![("step".to_string(), &step)];
        for p in &self.params {
            adam.push((format!("m:{}", p.name), &p.first_moment));
        }
        for p in &self.params {
            adam.push((format!("v:{}", p.name), &p.second_moment));
        }
        let adam_refs: Vec<(&str, &Matrix)> = adam.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        cof1::write_section(&mut out, *b"ADAM", &adam_refs);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = cof1::read_sections(bytes)?;
        let params = cof1::find_section(&sections, *b"PARM")?;
        let adam = cof1::find_section(&sections, *b"ADAM")?;
        let mut store = ParamStore::new();
        for (name, m) in params {
            store.add(name.clone(), m.clone());
        }
        let mut adam_iter = adam.iter();
        match adam_iter.next() {
            Some((name, m)) if name == "step" && m.data.len() == 1 => store.step = m.data[0] as u64,
            _ => return Err(CoffeeError::Format("ADAM section lacks a step record".into())),
        }
        let n = store.params.len();
        let moments: Vec<_> = adam_iter.collect();
        if moments.len() != 2 * n {
            return Err(CoffeeError::Format(format!(
                "ADAM section has {} moment records for {n} parameters",
                moments.len()
            )));
        }
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m_name, m) = moments[i];
            let (v_name, v) = moments[n + i];
            if *m_name != format!("m:{}", p.name) || *v_name != format!("v:{}", p.name) {
                return Err(CoffeeError::Format(format!("moment records out of order at `{}`", p.name)));
            }
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(CoffeeError::Format(format!("moment shape mismatch for `{}`", p.name)));
            }
            p.first_moment = m.clone();
            p.second_moment = v.clone();
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| CoffeeError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoffeeError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid xavier bound");
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

/// Normal(0, std) entries, used for embedding tables.
pub fn normal_init<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient written by `loss_fn` into the store's
/// gradient buffers against central differences.
///
/// `loss_fn` must zero nothing itself; the checker zeroes gradients before the
/// analytic pass. Parameters with at most `coords_per_param` entries are
/// checked exhaustively, larger ones on a seeded random sample.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    coords_per_param: usize,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&mut ParamStore) -> f64,
{
    store.zero_grads();
    loss_fn(store);
    let analytic: Vec<Matrix> = store.params.iter().map(|p| p.grad.clone()).collect();
    let mut rng = substream(seed, "grad-check");
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance,
    };
    for pi in 0..store.params.len() {
        let n = store.params[pi].value.data.len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let original = store.params[pi].value.data[c];
            store.params[pi].value.data[c] = original + GRAD_CHECK_STEP;
            let plus = loss_fn(store);
            store.params[pi].value.data[c] = original - GRAD_CHECK_STEP;
            let minus = loss_fn(store);
            store.params[pi].value.data[c] = original;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[pi].data[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.params[pi].name.clone(), c));
            }
        }
    }
    store.zero_grads();
    report
}

/// The tagged-section binary layout shared by checkpoints, k-NN indexes and
/// codebooks: `"COF1"` followed by sections of `tag[4] | u32 count | records`,
/// each record `u32 name_len | name | u32 rows | u32 cols | f64 LE payload`.
pub mod cof1 {
    use super::Matrix;
    use crate::error::{CoffeeError, Result};

    pub const MAGIC: &[u8; 4] = b"COF1";

    pub type Section = ([u8; 4], Vec<(String, Matrix)>);

    pub fn write_magic(out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
    }

    pub fn write_section(out: &mut Vec<u8>, tag: [u8; 4], records: &[(&str, &Matrix)]) {
        out.extend_from_slice(&tag);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, m) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or_else(|| CoffeeError::Format(format!("truncated at byte {}", self.pos)))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }
    }

    pub fn read_sections(bytes: &[u8]) -> Result<Vec<Section>> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CoffeeError::Format("missing COF1 magic".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut sections = Vec::new();
        while cur.pos < bytes.len() {
            let tag: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
            let count = cur.u32()? as usize;
            let mut records = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let name_len = cur.u32()? as usize;
                let name = std::str::from_utf8(cur.take(name_len)?)
                    .map_err(|e| CoffeeError::Format(e.to_string()))?
                    .to_string();
                let rows = cur.u32()? as usize;
                let cols = cur.u32()? as usize;
                let payload = cur.take(rows * cols * 8)?;
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                records.push((name, Matrix::from_vec(rows, cols, data)?));
            }
            sections.push((tag, records));
        }
        Ok(sections)
    }

    pub fn find_section(sections: &[Section], tag: [u8; 4]) -> Result<&Vec<(String, Matrix)>> {
        sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, r)| r)
            .ok_or_else(|| {
                CoffeeError::Format(format!("missing section {}", String::from_utf8_lossy(&tag)))
            })
    }
}
