//! Descriptor statistics: a FIFO memory queue with a two-pass covariance
//! estimate, and a batch-incremental running-average alternative.
//!
//! Both estimators end in the same place: a jittered symmetric matrix handed
//! to the projection builder. The queue path recomputes from its window each
//! time; the running path folds batches into a persistent state. Single-pass
//! `E[xxᵀ] − x̄x̄ᵀ` accumulation is deliberately absent: it cancels
//! catastrophically once descriptors drift from the origin.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};
use std::collections::VecDeque;

/// Sliding window of the most recent descriptors, oldest first.
///
/// Length never exceeds capacity; eviction is strictly FIFO; stored rows are
/// copies, detached from the batches they came from.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl MemoryQueue {
    /// `capacity` must be at least 2 (a covariance needs two samples) and
    /// `dim` at least 1.
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::InvalidConfig(format!(
                "queue capacity must be >= 2, got {capacity}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("queue dim must be >= 1".into()));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a batch of descriptors (rows), evicting the oldest entries
    /// once capacity is exceeded. The batch must be nonempty and no larger
    /// than the capacity.
    pub fn enqueue(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "MemoryQueue::enqueue",
                expected: self.dim,
                actual: batch.cols(),
            });
        }
        let b = batch.rows();
        if b == 0 {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if b > self.capacity {
            return Err(Error::InvalidBatch(format!(
                "batch of {b} exceeds queue capacity {}",
                self.capacity
            )));
        }
        for i in 0..b {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(batch.row(i).to_vec());
        }
        Ok(())
    }

    /// Copies the current contents, oldest first, as a `len x dim` matrix.
    pub fn snapshot(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows.len() * self.dim);
        for row in &self.rows {
            data.extend_from_slice(row);
        }
        Matrix::from_flat(self.rows.len(), self.dim, data).expect("queue rows share dim")
    }
}

/// A jittered covariance matrix ready for eigendecomposition.
///
/// `matrix` is the sample (or running) covariance plus `jitter` on the
/// diagonal, which bounds its smallest eigenvalue away from zero.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: SymMatrix,
    pub jitter: f64,
    pub sample_count: usize,
}

impl CovarianceEstimate {
    /// Wraps an externally built covariance. `base` is taken as jitter-free;
    /// the jitter is added here.
    pub fn from_base(base: SymMatrix, jitter: f64, sample_count: usize) -> Result<Self> {
        check_jitter(jitter)?;
        let mut matrix = base;
        matrix.add_diagonal(jitter);
        Ok(CovarianceEstimate {
            matrix,
            jitter,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

fn check_jitter(jitter: f64) -> Result<()> {
    if !jitter.is_finite() || jitter <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "jitter must be positive and finite, got {jitter}"
        )));
    }
    Ok(())
}

/// Unbiased two-pass sample covariance of the queue contents plus
/// `jitter * I`.
///
/// Needs at least 2 stored descriptors, all finite. First pass takes the
/// mean, second accumulates outer products of deviations, normalized by
/// `B - 1`; the triangle is mirrored so the result is exactly symmetric.
pub fn estimate_from_queue(queue: &MemoryQueue, jitter: f64) -> Result<CovarianceEstimate> {
    check_jitter(jitter)?;
    let b = queue.len();
    if b < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            actual: b,
        });
    }
    let snap = queue.snapshot();
    if !snap.is_finite() {
        return Err(Error::InvalidInput(
            "queue holds non-finite descriptors".into(),
        ));
    }
    let base = two_pass_covariance(&snap);
    CovarianceEstimate::from_base(base, jitter, b)
}

/// Two-pass covariance of the rows of `batch` (at least 2, checked by
/// callers), normalized by `rows - 1`.
pub(crate) fn two_pass_covariance(batch: &Matrix) -> SymMatrix {
    let b = batch.rows();
    let c = batch.cols();
    debug_assert!(b >= 2);
    let mut mean = vec![0.0; c];
    for i in 0..b {
        for (m, &x) in mean.iter_mut().zip(batch.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= b as f64;
    }
    // Packed upper triangle, accumulated row by row for locality.
    let mut acc = vec![0.0; c * (c + 1) / 2];
    let mut centered = vec![0.0; c];
    for r in 0..b {
        for (d, (&x, &m)) in centered.iter_mut().zip(batch.row(r).iter().zip(&mean)) {
            *d = x - m;
        }
        let mut idx = 0;
        for i in 0..c {
            let ci = centered[i];
            for &cj in &centered[i..] {
                acc[idx] += ci * cj;
                idx += 1;
            }
        }
    }
    let scale = 1.0 / (b as f64 - 1.0);
    let mut idx_of = vec![0usize; c];
    let mut idx = 0;
    for (i, slot) in idx_of.iter_mut().enumerate() {
        *slot = idx;
        idx += c - i;
    }
    SymMatrix::from_fn(c, |i, j| acc[idx_of[i] + (j - i)] * scale)
        .expect("finite input gives finite covariance")
}

/// Batch-incremental covariance state.
///
/// Starts from an identity matrix and zero mean with zero weight, so the
/// first update replaces the prior entirely. Each batch of size `b` folds in
/// as:
///
/// ```text
/// N' = N + b
/// x̄' = (N/N') x̄ + (1/N') Σ xᵢ
/// P' = (N/N') P + (1/N') Σ (xᵢ − x̄')(xᵢ − x̄')ᵀ
/// ```
///
/// Deviations use the updated mean. For a stationary stream this tracks the
/// brute-force covariance of everything seen.
#[derive(Debug, Clone)]
pub struct RunningAverageState {
    count: u64,
    mean: Vec<f64>,
    matrix: SymMatrix,
}

impl RunningAverageState {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("state dim must be >= 1".into()));
        }
        Ok(RunningAverageState {
            count: 0,
            mean: vec![0.0; dim],
            matrix: SymMatrix::identity(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Current covariance, jitter-free.
    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    /// Folds one batch into the state.
    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        let c = self.dim();
        if batch.cols() != c {
            return Err(Error::DimensionMismatch {
                context: "RunningAverageState::update",
                expected: c,
                actual: batch.cols(),
            });
        }
        let b = batch.rows();
        if b == 0 {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if !batch.is_finite() {
            return Err(Error::InvalidInput(
                "batch holds non-finite descriptors".into(),
            ));
        }
        let n_new = self.count + b as u64;
        let keep = (self.count as f64) / (n_new as f64);
        let fresh = 1.0 / (n_new as f64);

        let mut batch_sum = vec![0.0; c];
        for i in 0..b {
            for (s, &x) in batch_sum.iter_mut().zip(batch.row(i)) {
                *s += x;
            }
        }
        for (m, s) in self.mean.iter_mut().zip(&batch_sum) {
            *m = keep * *m + fresh * s;
        }

        let mean = &self.mean;
        let mut scatter = vec![0.0; c * (c + 1) / 2];
        let mut centered = vec![0.0; c];
        for r in 0..b {
            for (d, (&x, &m)) in centered.iter_mut().zip(batch.row(r).iter().zip(mean)) {
                *d = x - m;
            }
            let mut idx = 0;
            for i in 0..c {
                let ci = centered[i];
                for &cj in &centered[i..] {
                    scatter[idx] += ci * cj;
                    idx += 1;
                }
            }
        }
        let mut idx_of = vec![0usize; c];
        let mut idx = 0;
        for (i, slot) in idx_of.iter_mut().enumerate() {
            *slot = idx;
            idx += c - i;
        }
        let old = &self.matrix;
        self.matrix = SymMatrix::from_fn(c, |i, j| {
            keep * old.get(i, j) + fresh * scatter[idx_of[i] + (j - i)]
        })?;
        self.count = n_new;
        Ok(())
    }

    /// Current covariance plus `jitter * I`. Needs at least one seen sample.
    pub fn estimate(&self, jitter: f64) -> Result<CovarianceEstimate> {
        check_jitter(jitter)?;
        if self.count == 0 {
            return Err(Error::InsufficientSamples {
                needed: 1,
                actual: 0,
            });
        }
        CovarianceEstimate::from_base(
            self.matrix.clone(),
            jitter,
            usize::try_from(self.count).unwrap_or(usize::MAX),
        )
    }
}
