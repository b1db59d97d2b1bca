//! Wall-clock comparison of the grouped batched forward pass against the
//! per-sample sequential path on random weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{AdapterPool, LoraAdapter};
use crate::batch::{forward, sequential_by_ids, BaseModel, BatchError, BatchPlan, BatchTensor};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchParams {
    pub d: usize,
    pub r: usize,
    pub b: usize,
    pub l: usize,
    pub p: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            d: 256,
            r: 8,
            b: 64,
            l: 16,
            p: 4,
            repeats: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: BenchParams,
    /// Median over repeats, nanoseconds.
    pub batched_ns: u64,
    pub sequential_ns: u64,
    pub speedup: f64,
    /// Largest entry-wise difference between the two outputs.
    pub max_abs_diff: f32,
}

impl BenchParams {
    pub fn validate(&self) -> Result<(), BatchError> {
        let invalid = |m: String| Err(BatchError::InvalidConfig(m));
        if self.b == 0 {
            return Err(BatchError::EmptyBatch);
        }
        if self.p == 0 || self.p > self.b {
            return invalid(format!("p={} must be in 1..=b={}", self.p, self.b));
        }
        if self.d == 0 || self.r == 0 || self.l == 0 || self.repeats == 0 {
            return invalid("d, r, l and repeats must be at least 1".into());
        }
        if self.r > self.d {
            return invalid(format!("rank r={} exceeds d={}", self.r, self.d));
        }
        Ok(())
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// A random batch workload: base weight, `p` adapters, per-sample adapter
/// ids covering every adapter, and an input tensor.
pub struct Workload {
    pub base: BaseModel,
    pub pool: AdapterPool,
    pub ids: Vec<String>,
    pub x: BatchTensor,
}

impl Workload {
    pub fn random(params: &BenchParams) -> Result<Self, BatchError> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let bound = 1.0 / (params.d as f32).sqrt();
        let base = BaseModel::new(Matrix::random(params.d, params.d, bound, &mut rng))?;
        let mut pool = AdapterPool::new();
        for j in 0..params.p {
            let adapter =
                LoraAdapter::random(format!("bench-{j}"), format!("x{j}"), params.r, params.d, bound, &mut rng)
                    .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
            pool = pool
                .register(adapter)
                .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        }
        let mut slots: Vec<usize> = (0..params.p).collect();
        slots.extend((params.p..params.b).map(|_| rng.gen_range(0..params.p)));
        slots.shuffle(&mut rng);
        let ids = slots.into_iter().map(|j| format!("bench-{j}")).collect();
        let x = BatchTensor::random(params.b, params.l, params.d, 1.0, &mut rng);
        Ok(Self { base, pool, ids, x })
    }
}

pub fn run_bench(params: &BenchParams) -> Result<BenchReport, BatchError> {
    let w = Workload::random(params)?;
    let batched = || -> Result<BatchTensor, BatchError> {
        let plan = BatchPlan::from_adapter_ids(&w.ids, &w.pool)?;
        forward(&w.base, &plan, &w.x)
    };
    let sequential = || sequential_by_ids(&w.base, &w.ids, &w.pool, &w.x);

    let max_abs_diff = batched()?.max_abs_diff(&sequential()?);
    let (mut tb, mut ts) = (Vec::new(), Vec::new());
    for _ in 0..params.repeats {
        let t = Instant::now();
        std::hint::black_box(batched()?);
        tb.push(t.elapsed().as_nanos() as u64);
        let t = Instant::now();
        std::hint::black_box(sequential()?);
        ts.push(t.elapsed().as_nanos() as u64);
    }
    let (batched_ns, sequential_ns) = (median(tb).max(1), median(ts).max(1));
    Ok(BenchReport {
        params: *params,
        batched_ns,
        sequential_ns,
        speedup: sequential_ns as f64 / batched_ns as f64,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_agrees() {
        let params = BenchParams {
            d: 16,
            r: 2,
            b: 8,
            l: 3,
            p: 3,
            repeats: 3,
            seed: 1,
        };
        let report = run_bench(&params).unwrap();
        assert!(report.max_abs_diff <= 1e-5);
        assert!(report.speedup > 0.0);
    }

    #[test]
    fn workload_uses_every_adapter() {
        let w = Workload::random(&BenchParams { b: 10, p: 10, ..BenchParams::default() }).unwrap();
        let distinct: std::collections::HashSet<_> = w.ids.iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn rejects_bad_params() {
        let p = BenchParams { b: 2, p: 3, ..BenchParams::default() };
        assert!(matches!(run_bench(&p), Err(BatchError::InvalidConfig(_))));
        let p = BenchParams { b: 0, ..BenchParams::default() };
        assert!(matches!(run_bench(&p), Err(BatchError::EmptyBatch)));
        let p = BenchParams { r: 300, ..BenchParams::default() };
        assert!(run_bench(&p).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3, 1, 2]), 2);
        assert_eq!(median(vec![4, 1, 2, 3]), 2);
    }
}
