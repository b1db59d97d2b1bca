//! Deduplicated multi-adapter batch planning and the grouped batched forward
//! pass, plus a per-sample sequential oracle.
//!
//! A plan maps each of `b` samples to one of `p ≤ b` unique adapters through
//! a one-hot `b×p` matrix. Execution sorts samples by adapter, runs one
//! down/up projection pair per adapter group over all of that group's
//! positions, and scatters the result back.

use std::sync::Arc;

use thiserror::Error;

use crate::adapter::{AdapterPool, LoraAdapter};
use crate::linalg::{self, LinalgError, Matrix};
use crate::router::RoutingDecision;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no adapter `{0}` in the pool")]
    AdapterMissing(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid batch configuration: {0}")]
    InvalidConfig(String),
}

impl From<LinalgError> for BatchError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::DimensionMismatch { expected, found } => {
                BatchError::DimensionMismatch { expected, found }
            }
            other => BatchError::ShapeMismatch(other.to_string()),
        }
    }
}

/// The frozen weight of one adapted sub-module.
#[derive(Debug, Clone)]
pub struct BaseModel {
    w0: Matrix,
}

impl BaseModel {
    pub fn new(w0: Matrix) -> Result<Self, BatchError> {
        if w0.rows() != w0.cols() {
            return Err(BatchError::ShapeMismatch(format!(
                "W0 must be square, got {}x{}",
                w0.rows(),
                w0.cols()
            )));
        }
        Ok(Self { w0 })
    }

    pub fn dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.w0
    }
}

/// A `b×l×d` tensor of `f32`, row-major with `d` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    batch: usize,
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl BatchTensor {
    pub fn new(batch: usize, len: usize, dim: usize, data: Vec<f32>) -> Result<Self, BatchError> {
        if data.len() != batch * len * dim {
            return Err(BatchError::ShapeMismatch(format!(
                "{} values for a {batch}x{len}x{dim} tensor",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BatchError::ShapeMismatch(format!("non-finite entry at {pos}")));
        }
        Ok(Self {
            batch,
            len,
            dim,
            data,
        })
    }

    pub fn zeros(batch: usize, len: usize, dim: usize) -> Self {
        Self {
            batch,
            len,
            dim,
            data: vec![0.0; batch * len * dim],
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(
        batch: usize,
        len: usize,
        dim: usize,
        bound: f32,
        rng: &mut R,
    ) -> Self {
        let data = (0..batch * len * dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            batch,
            len,
            dim,
            data,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.len * self.dim;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn position(&self, i: usize, t: usize) -> &[f32] {
        let start = (i * self.len + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn max_abs_diff(&self, other: &BatchTensor) -> f32 {
        assert_eq!(
            (self.batch, self.len, self.dim),
            (other.batch, other.len, other.dim),
            "tensor shapes differ"
        );
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Unique adapters for one batch and the sample→adapter assignment.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    adapters: Vec<Arc<LoraAdapter>>,
    assignment: Vec<usize>,
}

impl BatchPlan {
    /// Plans directly from adapter ids, one per sample.
    pub fn from_adapter_ids<S: AsRef<str>>(ids: &[S], pool: &AdapterPool) -> Result<Self, BatchError> {
        if ids.is_empty() {
            return Err(BatchError::EmptyBatch);
        }
        let mut adapters: Vec<Arc<LoraAdapter>> = Vec::new();
        let mut assignment = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let slot = match adapters.iter().position(|a| a.id() == id) {
                Some(slot) => slot,
                None => {
                    let adapter = pool
                        .get_by_id(id)
                        .map_err(|_| BatchError::AdapterMissing(id.to_string()))?;
                    if let Some(first) = adapters.first() {
                        if first.dim() != adapter.dim() {
                            return Err(BatchError::DimensionMismatch {
                                expected: first.dim(),
                                found: adapter.dim(),
                            });
                        }
                    }
                    adapters.push(Arc::clone(adapter));
                    adapters.len() - 1
                }
            };
            assignment.push(slot);
        }
        Ok(Self {
            adapters,
            assignment,
        })
    }

    /// Batch size `b`.
    pub fn batch_size(&self) -> usize {
        self.assignment.len()
    }

    /// Number of unique adapters `p`.
    pub fn unique_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapters(&self) -> &[Arc<LoraAdapter>] {
        &self.adapters
    }

    /// `m(i)`: the adapter slot of each sample.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn dim(&self) -> usize {
        self.adapters[0].dim()
    }

    /// The one-hot `b×p` mapping matrix.
    pub fn mapping(&self) -> Matrix {
        let p = self.unique_count();
        let mut data = vec![0.0; self.batch_size() * p];
        for (i, &slot) in self.assignment.iter().enumerate() {
            data[i * p + slot] = 1.0;
        }
        Matrix::new(self.batch_size(), p, data).expect("one-hot entries are finite")
    }

    /// Sample indices per adapter slot, ascending within each group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.unique_count()];
        for (i, &slot) in self.assignment.iter().enumerate() {
            groups[slot].push(i);
        }
        groups
    }

    fn check_input(&self, x: &BatchTensor) -> Result<(), BatchError> {
        if x.batch() != self.batch_size() {
            return Err(BatchError::ShapeMismatch(format!(
                "input batch {} but plan has {} samples",
                x.batch(),
                self.batch_size()
            )));
        }
        if x.dim() != self.dim() {
            return Err(BatchError::ShapeMismatch(format!(
                "input dim {} but adapters have dim {}",
                x.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Dedups routed adapters in first-appearance order.
pub fn plan_batch(decisions: &[RoutingDecision], pool: &AdapterPool) -> Result<BatchPlan, BatchError> {
    let ids: Vec<&str> = decisions.iter().map(|d| d.adapter_id.as_str()).collect();
    BatchPlan::from_adapter_ids(&ids, pool)
}

/// Adds the grouped low-rank update for every sample into `out`.
fn accumulate_delta(plan: &BatchPlan, x: &BatchTensor, out: &mut [f32]) {
    let (len, dim) = (x.seq_len(), x.dim());
    let stride = len * dim;
    for (slot, members) in plan.groups().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let adapter = &plan.adapters[slot];
        let rank = adapter.rank();
        let rows = members.len() * len;

        let mut gathered = Vec::with_capacity(rows * dim);
        for &i in &members {
            gathered.extend_from_slice(x.sample(i));
        }
        let mut hidden = vec![0.0; rows * rank];
        linalg::gemm_nt(&gathered, rows, dim, adapter.a().as_slice(), rank, 1.0, &mut hidden);
        let mut delta = vec![0.0; rows * dim];
        linalg::gemm_nt(
            &hidden,
            rows,
            rank,
            adapter.b().as_slice(),
            dim,
            adapter.scaling(),
            &mut delta,
        );

        for (chunk, &i) in delta.chunks_exact(stride).zip(&members) {
            for (slot, &v) in out[i * stride..(i + 1) * stride].iter_mut().zip(chunk) {
                *slot += v;
            }
        }
    }
}

/// The low-rank contribution alone: `Δy[i][t] = (α/r) B_{m(i)} A_{m(i)} x[i][t]`.
pub fn batched_delta(plan: &BatchPlan, x: &BatchTensor) -> Result<BatchTensor, BatchError> {
    plan.check_input(x)?;
    let mut out = vec![0.0; x.as_slice().len()];
    accumulate_delta(plan, x, &mut out);
    BatchTensor::new(x.batch(), x.seq_len(), x.dim(), out)
}

/// `Y[i][t] = W0 x[i][t] + Δy[i][t]`.
pub fn forward(base: &BaseModel, plan: &BatchPlan, x: &BatchTensor) -> Result<BatchTensor, BatchError> {
    plan.check_input(x)?;
    if base.dim() != plan.dim() {
        return Err(BatchError::DimensionMismatch {
            expected: base.dim(),
            found: plan.dim(),
        });
    }
    let rows = x.batch() * x.seq_len();
    let mut out = vec![0.0; x.as_slice().len()];
    linalg::gemm_nt(x.as_slice(), rows, x.dim(), base.weight().as_slice(), base.dim(), 1.0, &mut out);
    accumulate_delta(plan, x, &mut out);
    BatchTensor::new(x.batch(), x.seq_len(), x.dim(), out)
}

/// Reference path: one sample at a time, resolve its adapter, then
/// `W0 x + (α/r) B A x` position by position.
pub fn sequential_oracle(
    base: &BaseModel,
    decisions: &[RoutingDecision],
    pool: &AdapterPool,
    x: &BatchTensor,
) -> Result<BatchTensor, BatchError> {
    let ids: Vec<&str> = decisions.iter().map(|d| d.adapter_id.as_str()).collect();
    sequential_by_ids(base, &ids, pool, x)
}

pub fn sequential_by_ids<S: AsRef<str>>(
    base: &BaseModel,
    ids: &[S],
    pool: &AdapterPool,
    x: &BatchTensor,
) -> Result<BatchTensor, BatchError> {
    if ids.is_empty() {
        return Err(BatchError::EmptyBatch);
    }
    if x.batch() != ids.len() {
        return Err(BatchError::ShapeMismatch(format!(
            "input batch {} but {} routing decisions",
            x.batch(),
            ids.len()
        )));
    }
    if x.dim() != base.dim() {
        return Err(BatchError::ShapeMismatch(format!(
            "input dim {} but W0 is {}x{}",
            x.dim(),
            base.dim(),
            base.dim()
        )));
    }
    let dim = x.dim();
    let mut out = Vec::with_capacity(x.as_slice().len());
    let mut delta = vec![0.0; dim];
    for (i, id) in ids.iter().enumerate() {
        let id = id.as_ref();
        let adapter = pool
            .get_by_id(id)
            .map_err(|_| BatchError::AdapterMissing(id.to_string()))?;
        if adapter.dim() != dim {
            return Err(BatchError::DimensionMismatch {
                expected: dim,
                found: adapter.dim(),
            });
        }
        for t in 0..x.seq_len() {
            let xt = x.position(i, t);
            let base_out = base.weight().matvec(xt)?;
            adapter.delta_into(xt, &mut delta);
            out.extend(base_out.iter().zip(&delta).map(|(y, d)| y + d));
        }
    }
    BatchTensor::new(x.batch(), x.seq_len(), dim, out)
}
