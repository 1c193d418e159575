//! The gradient rectification module (GRM).
//!
//! The idea: descriptor gradients produced by pairwise losses live in the
//! span of the descriptors themselves, so they inherit the anisotropy of the
//! descriptor distribution and keep reinforcing its principal directions. The
//! rectifier counteracts this with second-order statistics. From a
//! covariance estimate `P = U diag(λ) Uᵀ` of recent descriptors it builds
//!
//! ```text
//! P* = U diag((λ̄/λᵢ)^s) Uᵀ,    λ̄ = mean eigenvalue
//! ```
//!
//! and replaces each descriptor gradient `g` by `P* g` before
//! backpropagation. Components along over-represented directions (λᵢ > λ̄)
//! are damped, under-represented ones amplified. The rate `s` interpolates
//! from no-op (`s = 0`) through square-root rectification (`s = 0.5`) to full
//! linear rectification (`s = 1`).
//!
//! [`GrmModule`] packages the loop side: descriptors stream into an
//! estimator (FIFO queue or running average), `P*` is rebuilt every
//! `refresh_period` steps once warmup has seen enough samples, and gradients
//! pass through unchanged until then. Rectification only ever touches
//! training; a global op counter exists so tests can prove that evaluation
//! paths never execute any of it.

use crate::covariance::{estimate_from_queue, CovarianceEstimate, MemoryQueue, RunningAverageState};
use crate::error::{Error, Result};
use crate::linalg::{eigh_sym, sym_sandwich, Matrix, SymMatrix};
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts every executed rectification operation (projection builds,
/// gradient products, hook calls) process-wide.
static GRM_OPS: AtomicU64 = AtomicU64::new(0);

/// Total rectification operations executed so far in this process.
///
/// Snapshot before and after a code path to assert it is rectification-free;
/// evaluation must leave this unchanged.
pub fn ops_executed() -> u64 {
    GRM_OPS.load(Ordering::Relaxed)
}

fn count_op() {
    GRM_OPS.fetch_add(1, Ordering::Relaxed);
}

/// Which covariance estimator feeds the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// FIFO window of the last `queue_capacity` descriptors, re-estimated
    /// from scratch at each rebuild.
    Queue,
    /// Persistent batch-incremental state over everything seen.
    RunningAverage,
}

/// Rectifier configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GrmConfig {
    /// Exponent `s` in `(λ̄/λᵢ)^s`; 0 disables rectification exactly.
    pub rectification_rate: f64,
    /// Diagonal added to every covariance estimate before decomposition.
    pub jitter: f64,
    /// Descriptor window size for the queue estimator.
    pub queue_capacity: usize,
    pub estimator: EstimatorKind,
    /// Rebuild `P*` every this many hook steps.
    pub refresh_period: u64,
}

impl Default for GrmConfig {
    fn default() -> Self {
        GrmConfig {
            rectification_rate: 1.0,
            jitter: 1e-3,
            queue_capacity: 10_240,
            estimator: EstimatorKind::Queue,
            refresh_period: 1,
        }
    }
}

impl GrmConfig {
    /// Queue estimator with full linear rectification (the strongest and
    /// usually best-performing variant).
    pub fn bank_linear() -> Self {
        GrmConfig::default()
    }

    /// Running-average estimator with square-root rectification, the milder
    /// pairing that suits the smoother estimate.
    pub fn average_sqrt() -> Self {
        GrmConfig {
            rectification_rate: 0.5,
            estimator: EstimatorKind::RunningAverage,
            ..GrmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.rectification_rate;
        if !s.is_finite() || !(0.0..=2.0).contains(&s) {
            return Err(Error::InvalidConfig(format!(
                "rectification rate must lie in [0, 2], got {s}"
            )));
        }
        if !self.jitter.is_finite() || self.jitter <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "jitter must be positive, got {}",
                self.jitter
            )));
        }
        if self.queue_capacity < 2 {
            return Err(Error::InvalidConfig(format!(
                "queue capacity must be >= 2, got {}",
                self.queue_capacity
            )));
        }
        if self.refresh_period == 0 {
            return Err(Error::InvalidConfig(
                "refresh period must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The rectifier `P* = U diag((λ̄/λᵢ)^s) Uᵀ`.
///
/// Built from a covariance with eigenvalues `λᵢ`, its own eigenvalues are
/// `(λ̄/λᵢ)^s` (within 1e-9 relative). At `s = 0` it is stored as an exact
/// identity and application is a bitwise no-op.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    matrix: SymMatrix,
    rectification_rate: f64,
    source_mean_eigenvalue: f64,
    exact_identity: bool,
}

impl ProjectionMatrix {
    /// Exact pass-through projection, as emitted during warmup or at `s = 0`.
    pub fn identity(dim: usize) -> Self {
        ProjectionMatrix {
            matrix: SymMatrix::identity(dim),
            rectification_rate: 0.0,
            source_mean_eigenvalue: 1.0,
            exact_identity: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn rectification_rate(&self) -> f64 {
        self.rectification_rate
    }

    /// Mean eigenvalue `λ̄` of the covariance this was built from.
    pub fn source_mean_eigenvalue(&self) -> f64 {
        self.source_mean_eigenvalue
    }

    /// True when application is guaranteed to return inputs unchanged.
    pub fn is_identity(&self) -> bool {
        self.exact_identity
    }
}

/// Builds the rectifier from a jittered covariance estimate.
///
/// `s` must lie in `[0, 2]`. At `s = 0` no decomposition runs and the result
/// is an exact identity (mean eigenvalue taken as `trace / dim`). Otherwise
/// the estimate is eigendecomposed and every eigenvalue must be strictly
/// positive; the jitter makes that hold for any sane input, so a violation
/// surfaces as [`Error::NumericalFailure`].
pub fn build_projection(p: &CovarianceEstimate, s: f64) -> Result<ProjectionMatrix> {
    count_op();
    if !s.is_finite() || !(0.0..=2.0).contains(&s) {
        return Err(Error::InvalidConfig(format!(
            "rectification rate must lie in [0, 2], got {s}"
        )));
    }
    let dim = p.dim();
    if s == 0.0 {
        return Ok(ProjectionMatrix {
            matrix: SymMatrix::identity(dim),
            rectification_rate: 0.0,
            source_mean_eigenvalue: p.matrix.trace() / dim as f64,
            exact_identity: true,
        });
    }
    let eig = eigh_sym(&p.matrix)?;
    let mean = eig.mean_eigenvalue;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= 0.0 {
            return Err(Error::NumericalFailure(format!(
                "covariance eigenvalue {i} is {l:e} despite jitter {:e}",
                p.jitter
            )));
        }
    }
    let scales: Vec<f64> = eig.eigenvalues.iter().map(|&l| (mean / l).powf(s)).collect();
    let matrix = sym_sandwich(&eig.basis, &scales)?;
    Ok(ProjectionMatrix {
        matrix,
        rectification_rate: s,
        source_mean_eigenvalue: mean,
        exact_identity: false,
    })
}

/// Applies the rectifier to a batch of row gradients: each row `g` becomes
/// `P* g`. Identity projections return a bitwise copy of the input.
pub fn rectify(proj: &ProjectionMatrix, gradients: &Matrix) -> Result<Matrix> {
    count_op();
    if gradients.cols() != proj.dim() {
        return Err(Error::DimensionMismatch {
            context: "rectify",
            expected: proj.dim(),
            actual: gradients.cols(),
        });
    }
    if !gradients.is_finite() {
        return Err(Error::InvalidInput("non-finite gradient batch".into()));
    }
    if proj.exact_identity {
        return Ok(gradients.clone());
    }
    let mut out = Matrix::zeros(gradients.rows(), gradients.cols());
    for i in 0..gradients.rows() {
        let g = proj.matrix.matvec(gradients.row(i))?;
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

enum EstimatorState {
    Queue(MemoryQueue),
    Running(RunningAverageState),
}

/// Training-loop state: estimator, current projection, step counter.
///
/// Per hook call: (1) the batch descriptors are absorbed into the estimator;
/// (2) if the step index is a multiple of `refresh_period` and warmup is
/// satisfied, `P*` is rebuilt; (3) the gradient batch is rectified with the
/// current `P*`, or passed through bit-identically while none exists.
///
/// Warmup holds until the estimator has at least `max(2 * dim, 256)`
/// samples. A queue with capacity below that threshold therefore never
/// leaves warmup and the module stays an exact no-op.
pub struct GrmModule {
    config: GrmConfig,
    estimator: EstimatorState,
    projection: Option<ProjectionMatrix>,
    step: u64,
    rebuild_count: u64,
    warmup_threshold: usize,
    dim: usize,
}

impl GrmModule {
    pub fn new(dim: usize, config: GrmConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("descriptor dim must be >= 1".into()));
        }
        let estimator = match config.estimator {
            EstimatorKind::Queue => {
                EstimatorState::Queue(MemoryQueue::new(config.queue_capacity, dim)?)
            }
            EstimatorKind::RunningAverage => {
                EstimatorState::Running(RunningAverageState::new(dim)?)
            }
        };
        Ok(GrmModule {
            config,
            estimator,
            projection: None,
            step: 0,
            rebuild_count: 0,
            warmup_threshold: (2 * dim).max(256),
            dim,
        })
    }

    pub fn config(&self) -> &GrmConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hook steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Times `P*` has been (re)built.
    pub fn rebuild_count(&self) -> u64 {
        self.rebuild_count
    }

    pub fn warmup_threshold(&self) -> usize {
        self.warmup_threshold
    }

    /// Current projection, if warmup has completed and a rebuild has run.
    pub fn projection(&self) -> Option<&ProjectionMatrix> {
        self.projection.as_ref()
    }

    /// Samples currently backing the estimator (queue length or running
    /// count).
    pub fn samples_seen(&self) -> usize {
        match &self.estimator {
            EstimatorState::Queue(q) => q.len(),
            EstimatorState::Running(r) => usize::try_from(r.count()).unwrap_or(usize::MAX),
        }
    }

    /// Read-only view of the queue estimator, when that is the active kind.
    pub fn queue(&self) -> Option<&MemoryQueue> {
        match &self.estimator {
            EstimatorState::Queue(q) => Some(q),
            EstimatorState::Running(_) => None,
        }
    }

    fn current_estimate(&self) -> Result<CovarianceEstimate> {
        match &self.estimator {
            EstimatorState::Queue(q) => estimate_from_queue(q, self.config.jitter),
            EstimatorState::Running(r) => r.estimate(self.config.jitter),
        }
    }

    /// One training-step hook: absorb descriptors, maybe rebuild, rectify.
    ///
    /// `descriptors` and `gradients` must be the same shape with `dim`
    /// columns. Returns the gradients to backpropagate.
    pub fn hook(&mut self, descriptors: &Matrix, gradients: &Matrix) -> Result<Matrix> {
        count_op();
        if descriptors.rows() != gradients.rows() || descriptors.cols() != gradients.cols() {
            return Err(Error::InvalidBatch(format!(
                "descriptor batch {}x{} does not match gradient batch {}x{}",
                descriptors.rows(),
                descriptors.cols(),
                gradients.rows(),
                gradients.cols()
            )));
        }
        match &mut self.estimator {
            EstimatorState::Queue(q) => {
                // Chunked so batches larger than the window are accepted
                // here: the queue keeps the newest rows, same as feeding the
                // batch row by row. A single enqueue call still rejects
                // oversized batches.
                let cap = q.capacity();
                let mut start = 0;
                while start < descriptors.rows() {
                    let end = (start + cap).min(descriptors.rows());
                    q.enqueue(&descriptors.slice_rows(start, end))?;
                    start = end;
                }
            }
            EstimatorState::Running(r) => r.update(descriptors)?,
        }
        if self.step % self.config.refresh_period == 0
            && self.samples_seen() >= self.warmup_threshold
        {
            let estimate = self.current_estimate()?;
            self.projection = Some(build_projection(
                &estimate,
                self.config.rectification_rate,
            )?);
            self.rebuild_count += 1;
        }
        let out = match &self.projection {
            Some(p) => rectify(p, gradients)?,
            None => gradients.clone(),
        };
        self.step += 1;
        Ok(out)
    }

    /// Rectifies an extra gradient batch with the current `P*` without
    /// feeding the estimator (used for prototype gradients, which share the
    /// descriptor space but are not descriptors).
    pub fn apply(&self, gradients: &Matrix) -> Result<Matrix> {
        match &self.projection {
            Some(p) => rectify(p, gradients),
            None => {
                count_op();
                if gradients.cols() != self.dim {
                    return Err(Error::DimensionMismatch {
                        context: "GrmModule::apply",
                        expected: self.dim,
                        actual: gradients.cols(),
                    });
                }
                Ok(gradients.clone())
            }
        }
    }
}
