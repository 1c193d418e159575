//! Desk-scale experiment harness: synthetic place-retrieval data, training
//! loops for the pairwise and prototype losses, retrieval evaluation, and
//! the spectrum diagnostics used to watch descriptor and gradient
//! distributions evolve.
//!
//! Everything is deterministic at a fixed seed: data generation, batch
//! sampling, initialization, and evaluation all draw from seeded ChaCha8
//! streams in a fixed order, and rectification consumes no randomness. A run
//! with rectification disabled and one with rate 0 produce bit-identical
//! traces.

use crate::error::{Error, Result};
use crate::grm::{GrmConfig, GrmModule};
use crate::linalg::{dot, eigh_sym, squared_distance, Matrix};
use crate::model::{
    contrastive_grad, contrastive_loss, l2_normalize_backward, l2_normalize_rows,
    prototype_grad, prototype_loss, triplet_grad, triplet_loss, MlpEncoder, Optimizer,
    OptimizerKind, PairLabel, Triplet,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Denominator floor when forming condition numbers from near-zero
/// eigenvalues.
const EIGENVALUE_FLOOR: f64 = 1e-300;

/// Diagonal-mass window used for the per-epoch descriptor/gradient
/// alignment diagnostic.
const ALIGNMENT_TOP_K: usize = 8;

// ──────────────────────────── synthetic data ───────────────────────────

/// Parameters for the synthetic place-retrieval task.
///
/// Each place is a Gaussian blob: a center drawn from an axis-aligned
/// anisotropic Gaussian plus per-sample jitter. `anisotropy` is the ratio
/// of the largest to smallest center variance; the variances follow a
/// geometric ladder between them, scaled so the centers' total variance is
/// 0.25 (keeping raw squared distances around unity regardless of dim).
///
/// The jitter follows the same per-axis ladder as the centers — `noise_std`
/// is its standard deviation along the largest-variance axis — so the input
/// covariance keeps the centers' eigenvalue ratio no matter how noisy the
/// places are. At `anisotropy` 1 this is plain isotropic noise.
///
/// Query samples (the held-out rows of each place) get their jitter scaled
/// by `query_noise_factor`, modeling a capture pass under different
/// conditions than the mapped database. Factor 1 makes both passes
/// identically distributed.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_places: usize,
    pub samples_per_place: usize,
    pub dim: usize,
    pub anisotropy: f64,
    /// Within-place jitter std along the top axis.
    pub noise_std: f64,
    /// Query-pass jitter relative to the database pass.
    pub query_noise_factor: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_places: 200,
            samples_per_place: 20,
            dim: 32,
            anisotropy: 100.0,
            noise_std: 0.05,
            query_noise_factor: 4.0,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_places < 2 {
            return Err(Error::InvalidConfig("need at least 2 places".into()));
        }
        if self.samples_per_place < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 samples per place".into(),
            ));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if !self.anisotropy.is_finite() || self.anisotropy < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "anisotropy must be >= 1, got {}",
                self.anisotropy
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise std must be positive, got {}",
                self.noise_std
            )));
        }
        if !self.query_noise_factor.is_finite() || self.query_noise_factor < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "query noise factor must be nonnegative, got {}",
                self.query_noise_factor
            )));
        }
        Ok(())
    }

    /// Center variances per axis: geometric from `anisotropy` down to 1,
    /// rescaled to sum to 0.25.
    fn center_variances(&self) -> Vec<f64> {
        let d = self.dim;
        let mut eigs: Vec<f64> = if d == 1 {
            vec![1.0]
        } else {
            (0..d)
                .map(|i| self.anisotropy.powf((d - 1 - i) as f64 / (d - 1) as f64))
                .collect()
        };
        let total: f64 = eigs.iter().sum();
        for e in eigs.iter_mut() {
            *e *= 0.25 / total;
        }
        eigs
    }
}

/// Synthetic retrieval dataset: inputs grouped by place, with a fixed
/// query/database split (roughly a quarter of each place's samples are
/// queries, at least one stays in the database).
///
/// Input values are quantized to 32-bit floats at generation so the binary
/// format round-trips bit-exactly.
#[derive(Debug, Clone)]
pub struct RetrievalDataset {
    inputs: Matrix,
    place_ids: Vec<u32>,
    num_places: usize,
    samples_per_place: usize,
    query_indices: Vec<usize>,
    database_indices: Vec<usize>,
}

impl RetrievalDataset {
    /// Queries per place for a given group size.
    fn queries_per_place(samples_per_place: usize) -> usize {
        (samples_per_place / 4).max(1)
    }

    /// Assembles a dataset from raw parts, validating the place-major
    /// layout (`place_ids[i] == i / samples_per_place`).
    pub fn from_parts(inputs: Matrix, place_ids: Vec<u32>) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 || inputs.cols() == 0 {
            return Err(Error::Format("empty dataset".into()));
        }
        if place_ids.len() != n {
            return Err(Error::DimensionMismatch {
                context: "RetrievalDataset place ids",
                expected: n,
                actual: place_ids.len(),
            });
        }
        if !inputs.is_finite() {
            return Err(Error::Format("dataset holds non-finite inputs".into()));
        }
        let num_places = place_ids.iter().map(|&p| p as usize + 1).max().unwrap_or(0);
        if n % num_places != 0 {
            return Err(Error::Format(format!(
                "{n} samples do not divide evenly into {num_places} places"
            )));
        }
        let samples_per_place = n / num_places;
        if samples_per_place < 2 {
            return Err(Error::Format(
                "need at least 2 samples per place".into(),
            ));
        }
        for (i, &p) in place_ids.iter().enumerate() {
            if p as usize != i / samples_per_place {
                return Err(Error::Format(format!(
                    "place ids must be contiguous and place-major; sample {i} has id {p}"
                )));
            }
        }
        let q = Self::queries_per_place(samples_per_place);
        let mut query_indices = Vec::with_capacity(num_places * q);
        let mut database_indices = Vec::with_capacity(n - num_places * q);
        for place in 0..num_places {
            let base = place * samples_per_place;
            for off in 0..samples_per_place {
                if off < q {
                    query_indices.push(base + off);
                } else {
                    database_indices.push(base + off);
                }
            }
        }
        Ok(RetrievalDataset {
            inputs,
            place_ids,
            num_places,
            samples_per_place,
            query_indices,
            database_indices,
        })
    }

    /// Samples a fresh dataset; bit-identical for equal configs.
    pub fn generate(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let variances = config.center_variances();
        let stds: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
        // Jitter stds follow the center ladder, pinned to noise_std on the
        // widest axis.
        let top = stds[0];
        let noise: Vec<f64> = stds.iter().map(|s| config.noise_std * s / top).collect();
        let n = config.num_places * config.samples_per_place;
        let mut data = Vec::with_capacity(n * config.dim);
        let mut place_ids = Vec::with_capacity(n);
        let mut center = vec![0.0; config.dim];
        let queries = Self::queries_per_place(config.samples_per_place);
        for place in 0..config.num_places {
            for (c, &std) in center.iter_mut().zip(&stds) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *c = std * z;
            }
            for off in 0..config.samples_per_place {
                // The leading rows of each place are the query pass.
                let pass = if off < queries {
                    config.query_noise_factor
                } else {
                    1.0
                };
                for (&c, &sigma) in center.iter().zip(&noise) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    // f32 quantization keeps disk round-trips exact.
                    data.push((c + pass * sigma * z) as f32 as f64);
                }
                place_ids.push(place as u32);
            }
        }
        Self::from_parts(Matrix::from_flat(n, config.dim, data)?, place_ids)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn place_ids(&self) -> &[u32] {
        &self.place_ids
    }

    pub fn num_places(&self) -> usize {
        self.num_places
    }

    pub fn samples_per_place(&self) -> usize {
        self.samples_per_place
    }

    pub fn place_of(&self, index: usize) -> usize {
        self.place_ids[index] as usize
    }

    /// Held-out query sample indices (never used for training).
    pub fn query_indices(&self) -> &[usize] {
        &self.query_indices
    }

    /// Database sample indices; training draws anchors, positives and
    /// negatives from these.
    pub fn database_indices(&self) -> &[usize] {
        &self.database_indices
    }

    fn database_per_place(&self) -> usize {
        self.samples_per_place - Self::queries_per_place(self.samples_per_place)
    }

    /// Copies the given rows into a batch matrix.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Matrix::from_flat(indices.len(), self.dim(), data).expect("rows share dim")
    }
}

// ───────────────────────────── diagnostics ─────────────────────────────

/// Eigen-spectrum summary of a sample batch: eigenvalues of the jitter-free
/// sample covariance (descending), their eigenbasis, and the ratio of
/// extreme eigenvalues.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub condition_number: f64,
    pub basis: Matrix,
}

/// Spectrum of the sample covariance of `batch` rows (at least 2 required).
///
/// No jitter is added; a rank-deficient batch legitimately reports
/// near-zero trailing eigenvalues, and the condition number saturates
/// instead of dividing by zero (a batch with no variance at all reports
/// infinity).
pub fn spectrum_report(batch: &Matrix) -> Result<SpectrumReport> {
    if batch.rows() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            actual: batch.rows(),
        });
    }
    if !batch.is_finite() {
        return Err(Error::InvalidInput("non-finite batch".into()));
    }
    let cov = crate::covariance::two_pass_covariance(batch);
    let eig = eigh_sym(&cov)?;
    let first = eig.eigenvalues[0];
    let last = *eig.eigenvalues.last().expect("nonempty");
    let condition_number = if first <= EIGENVALUE_FLOOR {
        f64::INFINITY
    } else {
        first / last.max(EIGENVALUE_FLOOR)
    };
    Ok(SpectrumReport {
        eigenvalues: eig.eigenvalues,
        condition_number,
        basis: eig.basis,
    })
}

/// Absolute-dot-product alignment between two orthonormal bases:
/// `A[i][j] = |aᵢ · bⱼ|` over columns.
///
/// Rows and columns each have unit squared sum, so concentration on the
/// diagonal means the bases agree direction by direction.
#[derive(Debug, Clone)]
pub struct AlignmentMatrix {
    pub values: Matrix,
}

/// Builds the alignment matrix; both bases must be square, same dim, with
/// orthonormal columns (checked to 1e-8).
pub fn alignment_matrix(a: &Matrix, b: &Matrix) -> Result<AlignmentMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n || b.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "alignment_matrix",
            expected: n,
            actual: if a.cols() != n { a.cols() } else { b.rows() },
        });
    }
    for (name, m) in [("first", a), ("second", b)] {
        let gram = m.transpose().matmul(m)?;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram.get(i, j) - want).abs() > 1e-8 {
                    return Err(Error::InvalidInput(format!(
                        "{name} basis is not orthonormal at ({i}, {j})"
                    )));
                }
            }
        }
    }
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        let ai = a.col(i);
        for j in 0..n {
            let bj = b.col(j);
            values.set(i, j, dot(&ai, &bj).abs());
        }
    }
    Ok(AlignmentMatrix { values })
}

/// Mean of the first `top_k` diagonal entries of an alignment matrix.
/// `top_k` must lie in `1..=dim`.
pub fn diagonal_mass(alignment: &AlignmentMatrix, top_k: usize) -> f64 {
    let n = alignment.values.rows();
    assert!(top_k >= 1 && top_k <= n, "top_k {top_k} out of range 1..={n}");
    (0..top_k).map(|i| alignment.values.get(i, i)).sum::<f64>() / top_k as f64
}

// ─────────────────────────────── recall ────────────────────────────────

/// Fraction of queries whose `n` nearest database rows (squared distance,
/// ties broken by ascending database index) include at least one positive.
///
/// `positives[q]` lists database row indices relevant to query `q`; every
/// query needs at least one, and each `n` must lie in `1..=database rows`.
/// Returns `(n, recall)` pairs in the order given.
pub fn recall_at_n(
    query_descriptors: &Matrix,
    database_descriptors: &Matrix,
    positives: &[Vec<usize>],
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let db = database_descriptors.rows();
    if db == 0 {
        return Err(Error::InvalidBatch("empty database".into()));
    }
    if query_descriptors.cols() != database_descriptors.cols() {
        return Err(Error::DimensionMismatch {
            context: "recall_at_n descriptor dim",
            expected: database_descriptors.cols(),
            actual: query_descriptors.cols(),
        });
    }
    if positives.len() != query_descriptors.rows() {
        return Err(Error::DimensionMismatch {
            context: "recall_at_n positives",
            expected: query_descriptors.rows(),
            actual: positives.len(),
        });
    }
    if !query_descriptors.is_finite() || !database_descriptors.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptors".into()));
    }
    for (q, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::InvalidBatch(format!("query {q} has no positives")));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= db) {
            return Err(Error::InvalidBatch(format!(
                "query {q} positive {bad} out of range for database of {db}"
            )));
        }
    }
    for &n in ns {
        if n == 0 || n > db {
            return Err(Error::InvalidConfig(format!(
                "recall depth {n} out of range 1..={db}"
            )));
        }
    }

    let max_n = ns.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ns.len()];
    let mut order: Vec<usize> = Vec::with_capacity(db);
    for (q, pos) in positives.iter().enumerate() {
        let qrow = query_descriptors.row(q);
        let dists: Vec<f64> = (0..db)
            .map(|d| squared_distance(qrow, database_descriptors.row(d)))
            .collect();
        order.clear();
        order.extend(0..db);
        order.sort_by(|&x, &y| dists[x].total_cmp(&dists[y]).then(x.cmp(&y)));
        let mut first_hit = None;
        for (rank, &d) in order[..max_n].iter().enumerate() {
            if pos.contains(&d) {
                first_hit = Some(rank);
                break;
            }
        }
        if let Some(rank) = first_hit {
            for (slot, &n) in hits.iter_mut().zip(ns) {
                if rank < n {
                    *slot += 1;
                }
            }
        }
    }
    let nq = positives.len() as f64;
    Ok(ns
        .iter()
        .zip(&hits)
        .map(|(&n, &h)| (n, h as f64 / nq))
        .collect())
}

/// Retrieval evaluation result: recall at the requested depths plus the
/// database descriptor spectrum.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub recall: Vec<(usize, f64)>,
    pub spectrum: SpectrumReport,
}

/// Encodes every row of `inputs` without keeping the forward cache.
pub fn encode_all(encoder: &MlpEncoder, inputs: &Matrix) -> Result<Matrix> {
    Ok(encoder.forward(inputs)?.descriptors().clone())
}

/// Standard recall depths, clamped to the database size and deduplicated.
fn eval_depths(db: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for n in [1usize, 5, 10] {
        let n = n.min(db);
        if n >= 1 && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Positive database rows (same place) for each query index.
pub fn query_positives(data: &RetrievalDataset) -> Vec<Vec<usize>> {
    data.query_indices()
        .iter()
        .map(|&q| {
            let place = data.place_of(q);
            data.database_indices()
                .iter()
                .enumerate()
                .filter(|(_, &d)| data.place_of(d) == place)
                .map(|(row, _)| row)
                .collect()
        })
        .collect()
}

/// Runs held-out queries against the database under the given encoder.
///
/// Purely feed-forward: no rectification state is consulted or mutated.
pub fn evaluate(encoder: &MlpEncoder, data: &RetrievalDataset) -> Result<EvalReport> {
    let query_desc = encode_all(encoder, &data.gather(data.query_indices()))?;
    let db_desc = encode_all(encoder, &data.gather(data.database_indices()))?;
    let recall = recall_at_n(
        &query_desc,
        &db_desc,
        &query_positives(data),
        &eval_depths(db_desc.rows()),
    )?;
    let spectrum = spectrum_report(&db_desc)?;
    Ok(EvalReport { recall, spectrum })
}

/// Fraction of all samples whose nearest prototype matches their place.
pub fn classification_accuracy(
    encoder: &MlpEncoder,
    prototypes: &Matrix,
    data: &RetrievalDataset,
) -> Result<f64> {
    if prototypes.rows() != data.num_places() {
        return Err(Error::DimensionMismatch {
            context: "classification_accuracy prototypes",
            expected: data.num_places(),
            actual: prototypes.rows(),
        });
    }
    let desc = encode_all(encoder, data.inputs())?;
    let mut correct = 0usize;
    for i in 0..desc.rows() {
        let row = desc.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..prototypes.rows() {
            let d = squared_distance(row, prototypes.row(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best == data.place_of(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / desc.rows() as f64)
}

/// One read-only pass of pairwise batches over the database partition,
/// returning every descriptor row and its raw loss gradient (pre
/// rectification), stacked in visiting order.
///
/// Sampling mirrors a training epoch at the config's seed, but nothing is
/// updated — the encoder is only read — so the pass can profile the gradient
/// distribution a saved checkpoint would see. Only the pairwise losses apply;
/// the prototype loss has no query/negative structure to survey.
pub fn gradient_survey(
    encoder: &MlpEncoder,
    data: &RetrievalDataset,
    config: &TrainConfig,
) -> Result<(Matrix, Matrix)> {
    if encoder.input_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "gradient_survey input dim",
            expected: data.dim(),
            actual: encoder.input_dim(),
        });
    }
    let (margin, use_triplets) = match config.loss {
        LossKind::Contrastive { margin } => (margin, false),
        LossKind::Triplet { margin } => (margin, true),
        LossKind::Prototype { .. } => {
            return Err(Error::InvalidConfig(
                "gradient survey requires a pairwise loss".into(),
            ))
        }
    };
    if config.queries_per_batch == 0 || config.negatives_per_query == 0 {
        return Err(Error::InvalidConfig(
            "queries per batch and negatives per query must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = data.database_indices().to_vec();
    order.shuffle(&mut rng);
    let mut buffers = EpochBuffers::new(encoder.output_dim());
    for batch_indices in order.chunks(config.queries_per_batch) {
        let batch = sample_pair_batch(data, batch_indices, config.negatives_per_query, &mut rng);
        let pass = encoder.forward(&batch.inputs)?;
        let descriptors = pass.descriptors().clone();
        let spec = if use_triplets {
            LossSpec::Triplets {
                triplets: &batch.triplets,
                margin,
            }
        } else {
            LossSpec::Pairs {
                pairs: &batch.pairs,
                margin,
            }
        };
        let (_, grad, _) =
            descriptor_loss_and_grad(&descriptors, &spec, config.normalize_descriptors)?;
        buffers.push(&descriptors, &grad);
    }
    let d = Matrix::from_flat(buffers.rows, buffers.dim, buffers.descriptors.clone())?;
    let g = Matrix::from_flat(buffers.rows, buffers.dim, buffers.gradients.clone())?;
    Ok((d, g))
}

// ───────────────────────────── training ────────────────────────────────

/// Loss selector with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Contrastive { margin: f64 },
    Triplet { margin: f64 },
    Prototype { temperature: f64 },
}

/// Epoch-level learning-rate decay: multiply by `factor` every
/// `every_epochs` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Encoder widths `[input, hidden..., descriptor]`.
    pub layer_sizes: Vec<usize>,
    pub loss: LossKind,
    /// `None` disables rectification entirely.
    pub grm: Option<GrmConfig>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay: Option<LrDecay>,
    pub epochs: usize,
    /// Queries per pairwise batch; each query brings 1 positive and
    /// `negatives_per_query` negatives.
    pub queries_per_batch: usize,
    pub negatives_per_query: usize,
    /// Batch size for the prototype (classification) loss.
    pub batch_size: usize,
    /// L2-normalize descriptors inside the loss (gradients are chained
    /// through the normalization; the rectifier still sees raw descriptors).
    pub normalize_descriptors: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Retrieval preset: contrastive loss, Adam at 1e-4, rectification on
    /// with its defaults (window 10240, rate 1, jitter 1e-3, refresh every
    /// step).
    pub fn retrieval_default(input_dim: usize) -> Self {
        TrainConfig {
            layer_sizes: vec![input_dim, 64, 32],
            loss: LossKind::Contrastive { margin: 1.0 },
            grm: Some(GrmConfig::default()),
            optimizer: OptimizerKind::adam_default(),
            learning_rate: 1e-4,
            lr_decay: None,
            epochs: 20,
            queries_per_batch: 16,
            negatives_per_query: 5,
            batch_size: 64,
            normalize_descriptors: false,
            seed: 7,
        }
    }

    /// Classification preset: prototype loss, Adam at 2e-3 decayed by 0.7
    /// every 20 epochs.
    pub fn classification_default(input_dim: usize) -> Self {
        TrainConfig {
            loss: LossKind::Prototype { temperature: 1.0 },
            optimizer: OptimizerKind::adam_default(),
            learning_rate: 2e-3,
            lr_decay: Some(LrDecay {
                factor: 0.7,
                every_epochs: 20,
            }),
            epochs: 60,
            ..TrainConfig::retrieval_default(input_dim)
        }
    }

    pub fn validate(&self, data: &RetrievalDataset) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!(
                "bad layer sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes[0] != data.dim() {
            return Err(Error::DimensionMismatch {
                context: "TrainConfig input dim",
                expected: data.dim(),
                actual: self.layer_sizes[0],
            });
        }
        match self.loss {
            LossKind::Contrastive { margin } | LossKind::Triplet { margin } => {
                if !margin.is_finite() || margin <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "margin must be positive, got {margin}"
                    )));
                }
                if self.queries_per_batch == 0 || self.negatives_per_query == 0 {
                    return Err(Error::InvalidConfig(
                        "queries per batch and negatives per query must be >= 1".into(),
                    ));
                }
                if data.database_per_place() < 2 {
                    return Err(Error::InvalidConfig(
                        "pairwise training needs at least 2 database samples per place".into(),
                    ));
                }
            }
            LossKind::Prototype { temperature } => {
                if !temperature.is_finite() || temperature <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                if self.batch_size < 2 {
                    return Err(Error::InvalidConfig("batch size must be >= 2".into()));
                }
            }
        }
        if let Some(grm) = &self.grm {
            grm.validate()?;
        }
        if let Some(decay) = &self.lr_decay {
            if !decay.factor.is_finite() || decay.factor <= 0.0 || decay.factor > 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "decay factor must lie in (0, 1], got {}",
                    decay.factor
                )));
            }
            if decay.every_epochs == 0 {
                return Err(Error::InvalidConfig("decay period must be >= 1".into()));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-step batch loss.
    pub loss: f64,
    /// Condition number of the epoch's descriptor sample covariance.
    pub desc_cond: f64,
    /// Condition number of the epoch's (rectified) gradient covariance.
    pub grad_cond: f64,
    pub recall1: f64,
    pub recall5: f64,
    pub recall10: f64,
    /// Mean top-8 diagonal of the descriptor/gradient basis alignment.
    pub desc_grad_diag_mass: f64,
}

/// Per-epoch spectra kept in memory for diagnostics.
#[derive(Debug, Clone)]
pub struct EpochSnapshot {
    pub descriptor_spectrum: SpectrumReport,
    pub gradient_spectrum: SpectrumReport,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: MlpEncoder,
    /// Present for prototype training.
    pub prototypes: Option<Matrix>,
    pub log: Vec<EpochRecord>,
    pub snapshots: Vec<EpochSnapshot>,
    /// False when the run aborted on a numerical failure; the encoder then
    /// holds the last epoch-end parameters.
    pub completed: bool,
    pub abort: Option<String>,
    /// Nearest-prototype accuracy over the whole dataset (prototype runs).
    pub final_accuracy: Option<f64>,
    /// Final memory-queue contents (queue-estimator rectification runs),
    /// oldest row first, for export.
    pub queue_snapshot: Option<Matrix>,
}

/// One optimizer update on an explicit pairwise batch. Exposed so a
/// single-layer, single-pair step can be checked against hand arithmetic;
/// [`train`] routes every contrastive step through here.
///
/// Order per step: forward, loss gradient, rectification hook (when
/// enabled), backprop, optimizer. Returns the batch loss.
pub fn pairwise_training_step(
    encoder: &mut MlpEncoder,
    optimizer: &mut Optimizer,
    grm: Option<&mut GrmModule>,
    inputs: &Matrix,
    pairs: &[PairLabel],
    margin: f64,
    normalize: bool,
) -> Result<f64> {
    let step = step_on_pairs(encoder, grm, inputs, pairs, margin, normalize)?;
    let mut params = encoder.flatten_params();
    optimizer.step(&mut params, &step.param_grads)?;
    encoder.assign_params(&params)?;
    Ok(step.loss)
}

/// Intermediate results of a descriptor-level step, before the optimizer.
struct StepEval {
    loss: f64,
    descriptors: Matrix,
    rectified: Matrix,
    param_grads: Vec<f64>,
}

fn descriptor_loss_and_grad(
    descriptors: &Matrix,
    loss: &LossSpec<'_>,
    normalize: bool,
) -> Result<(f64, Matrix, Option<Matrix>)> {
    // Optionally normalize inside the loss; gradients chain back to the raw
    // descriptors either way.
    let (loss_desc, norms) = if normalize {
        let (unit, norms) = l2_normalize_rows(descriptors)?;
        (unit, Some(norms))
    } else {
        (descriptors.clone(), None)
    };
    let (value, grad, proto_grad) = match loss {
        LossSpec::Pairs { pairs, margin } => (
            contrastive_loss(&loss_desc, pairs, *margin)?,
            contrastive_grad(&loss_desc, pairs, *margin)?,
            None,
        ),
        LossSpec::Triplets { triplets, margin } => (
            triplet_loss(&loss_desc, triplets, *margin)?,
            triplet_grad(&loss_desc, triplets, *margin)?,
            None,
        ),
        LossSpec::Prototype {
            labels,
            prototypes,
            temperature,
        } => {
            let value = prototype_loss(&loss_desc, labels, prototypes, *temperature)?;
            let (dg, pg) = prototype_grad(&loss_desc, labels, prototypes, *temperature)?;
            (value, dg, Some(pg))
        }
    };
    let raw_grad = match &norms {
        Some(norms) => l2_normalize_backward(&loss_desc, norms, &grad)?,
        None => grad,
    };
    Ok((value, raw_grad, proto_grad))
}

enum LossSpec<'a> {
    Pairs {
        pairs: &'a [PairLabel],
        margin: f64,
    },
    Triplets {
        triplets: &'a [Triplet],
        margin: f64,
    },
    Prototype {
        labels: &'a [usize],
        prototypes: &'a Matrix,
        temperature: f64,
    },
}

fn step_on_pairs(
    encoder: &MlpEncoder,
    grm: Option<&mut GrmModule>,
    inputs: &Matrix,
    pairs: &[PairLabel],
    margin: f64,
    normalize: bool,
) -> Result<StepEval> {
    let pass = encoder.forward(inputs)?;
    let descriptors = pass.descriptors().clone();
    let (loss, desc_grad, _) =
        descriptor_loss_and_grad(&descriptors, &LossSpec::Pairs { pairs, margin }, normalize)?;
    let rectified = match grm {
        Some(module) => module.hook(&descriptors, &desc_grad)?,
        None => desc_grad,
    };
    let param_grads = encoder.backward(&pass, &rectified)?.flatten();
    Ok(StepEval {
        loss,
        descriptors,
        rectified,
        param_grads,
    })
}

/// Draws a pairwise batch: for each anchor, one positive from the same
/// place and `m` negatives from other places, all database rows, one rng
/// draw each.
struct PairBatch {
    inputs: Matrix,
    pairs: Vec<PairLabel>,
    triplets: Vec<Triplet>,
}

fn sample_pair_batch(
    data: &RetrievalDataset,
    anchors: &[usize],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> PairBatch {
    let spp = data.samples_per_place();
    let q = RetrievalDataset::queries_per_place(spp);
    let dbpp = spp - q;
    let total_db = data.num_places() * dbpp;
    let mut indices = Vec::with_capacity(anchors.len() * (2 + m));
    let mut pairs = Vec::with_capacity(anchors.len() * (1 + m));
    let mut triplets = Vec::with_capacity(anchors.len() * m);
    for &anchor in anchors {
        let place = data.place_of(anchor);
        let within_db = anchor - place * spp - q;
        let base = indices.len();
        indices.push(anchor);
        // Positive: uniform over the place's other database rows.
        let mut r = rng.random_range(0..dbpp - 1);
        if r >= within_db {
            r += 1;
        }
        indices.push(place * spp + q + r);
        pairs.push(PairLabel {
            i: base,
            j: base + 1,
            positive: true,
        });
        // Negatives: uniform over all other places' database rows.
        for neg in 0..m {
            let mut r = rng.random_range(0..total_db - dbpp);
            if r >= place * dbpp {
                r += dbpp;
            }
            let neg_place = r / dbpp;
            let neg_off = r % dbpp;
            indices.push(neg_place * spp + q + neg_off);
            pairs.push(PairLabel {
                i: base,
                j: base + 2 + neg,
                positive: false,
            });
            triplets.push(Triplet {
                anchor: base,
                positive: base + 1,
                negative: base + 2 + neg,
            });
        }
    }
    PairBatch {
        inputs: data.gather(&indices),
        pairs,
        triplets,
    }
}

/// Epoch-level diagnostic accumulators: every descriptor and rectified
/// gradient row the encoder saw during the epoch.
struct EpochBuffers {
    descriptors: Vec<f64>,
    gradients: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl EpochBuffers {
    fn new(dim: usize) -> Self {
        EpochBuffers {
            descriptors: Vec::new(),
            gradients: Vec::new(),
            rows: 0,
            dim,
        }
    }

    fn push(&mut self, descriptors: &Matrix, gradients: &Matrix) {
        self.descriptors.extend_from_slice(descriptors.data());
        self.gradients.extend_from_slice(gradients.data());
        self.rows += descriptors.rows();
    }

    fn clear(&mut self) {
        self.descriptors.clear();
        self.gradients.clear();
        self.rows = 0;
    }

    fn spectra(&self) -> Result<(SpectrumReport, SpectrumReport)> {
        let d = Matrix::from_flat(self.rows, self.dim, self.descriptors.clone())?;
        let g = Matrix::from_flat(self.rows, self.dim, self.gradients.clone())?;
        Ok((spectrum_report(&d)?, spectrum_report(&g)?))
    }
}

fn decayed_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match &config.lr_decay {
        Some(decay) => {
            config.learning_rate * decay.factor.powi((epoch / decay.every_epochs) as i32)
        }
        None => config.learning_rate,
    }
}

/// Trains an encoder on the dataset per the config.
///
/// Pairwise losses draw anchors from the database partition (queries stay
/// held out); the prototype loss trains a zero-initialized prototype per
/// place alongside the encoder, rectifying prototype gradients with the
/// same projection as descriptor gradients.
///
/// A non-finite loss, descriptor batch, or parameter gradient aborts the
/// run and rolls parameters back to the last completed epoch; the partial
/// log is kept and `completed` is false. Fixed seeds give bit-identical
/// outcomes, and disabling rectification is bit-identical to rate 0.
pub fn train(config: &TrainConfig, data: &RetrievalDataset) -> Result<TrainOutcome> {
    config.validate(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = MlpEncoder::random(&config.layer_sizes, &mut rng)?;
    let dim = encoder.output_dim();
    let mut prototypes = match config.loss {
        LossKind::Prototype { .. } => Some(Matrix::zeros(data.num_places(), dim)),
        _ => None,
    };
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut grm = match &config.grm {
        Some(grm_config) => Some(GrmModule::new(dim, grm_config.clone())?),
        None => None,
    };

    let mut buffers = EpochBuffers::new(dim);
    let mut log = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut last_good_encoder = encoder.flatten_params();
    let mut last_good_prototypes = prototypes.clone();
    let mut abort: Option<String> = None;

    'epochs: for epoch in 0..config.epochs {
        optimizer.set_learning_rate(decayed_lr(config, epoch))?;
        let mut order: Vec<usize> = data.database_indices().to_vec();
        order.shuffle(&mut rng);
        let chunk = match config.loss {
            LossKind::Prototype { .. } => config.batch_size,
            _ => config.queries_per_batch,
        };
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        buffers.clear();

        for batch_indices in order.chunks(chunk) {
            let step = match &config.loss {
                LossKind::Contrastive { margin } | LossKind::Triplet { margin } => {
                    let batch = sample_pair_batch(
                        data,
                        batch_indices,
                        config.negatives_per_query,
                        &mut rng,
                    );
                    let pass = encoder.forward(&batch.inputs)?;
                    let descriptors = pass.descriptors().clone();
                    if !descriptors.is_finite() {
                        abort = Some(format!("non-finite descriptors at epoch {epoch}"));
                        break 'epochs;
                    }
                    let spec = match config.loss {
                        LossKind::Contrastive { .. } => LossSpec::Pairs {
                            pairs: &batch.pairs,
                            margin: *margin,
                        },
                        _ => LossSpec::Triplets {
                            triplets: &batch.triplets,
                            margin: *margin,
                        },
                    };
                    let (loss, desc_grad, _) = descriptor_loss_and_grad(
                        &descriptors,
                        &spec,
                        config.normalize_descriptors,
                    )?;
                    if !loss.is_finite() || !desc_grad.is_finite() {
                        abort = Some(format!("non-finite loss or gradient at epoch {epoch}"));
                        break 'epochs;
                    }
                    let rectified = match grm.as_mut() {
                        Some(module) => match module.hook(&descriptors, &desc_grad) {
                            Ok(m) => m,
                            Err(Error::NumericalFailure(msg)) => {
                                abort = Some(format!("epoch {epoch}: {msg}"));
                                break 'epochs;
                            }
                            Err(e) => return Err(e),
                        },
                        None => desc_grad,
                    };
                    let param_grads = encoder.backward(&pass, &rectified)?.flatten();
                    StepEval {
                        loss,
                        descriptors,
                        rectified,
                        param_grads,
                    }
                }
                LossKind::Prototype { temperature } => {
                    let inputs = data.gather(batch_indices);
                    let labels: Vec<usize> =
                        batch_indices.iter().map(|&i| data.place_of(i)).collect();
                    let pass = encoder.forward(&inputs)?;
                    let descriptors = pass.descriptors().clone();
                    if !descriptors.is_finite() {
                        abort = Some(format!("non-finite descriptors at epoch {epoch}"));
                        break 'epochs;
                    }
                    let protos = prototypes.as_ref().expect("prototype loss has prototypes");
                    let (loss, desc_grad, proto_grad) = descriptor_loss_and_grad(
                        &descriptors,
                        &LossSpec::Prototype {
                            labels: &labels,
                            prototypes: protos,
                            temperature: *temperature,
                        },
                        config.normalize_descriptors,
                    )?;
                    let proto_grad = proto_grad.expect("prototype loss yields prototype grads");
                    if !loss.is_finite() || !desc_grad.is_finite() || !proto_grad.is_finite() {
                        abort = Some(format!("non-finite loss or gradient at epoch {epoch}"));
                        break 'epochs;
                    }
                    // Rectify both gradient families with the same
                    // projection; only descriptors feed the estimator.
                    let (rectified, proto_rect) = match grm.as_mut() {
                        Some(module) => {
                            let d = module
                                .hook(&descriptors, &desc_grad)
                                .and_then(|d| Ok((d, module.apply(&proto_grad)?)));
                            match d {
                                Ok(pair) => pair,
                                Err(Error::NumericalFailure(msg)) => {
                                    abort = Some(format!("epoch {epoch}: {msg}"));
                                    break 'epochs;
                                }
                                Err(e) => return Err(e),
                            }
                        }
                        None => (desc_grad, proto_grad),
                    };
                    let mut param_grads = encoder.backward(&pass, &rectified)?.flatten();
                    param_grads.extend_from_slice(proto_rect.data());
                    StepEval {
                        loss,
                        descriptors,
                        rectified,
                        param_grads,
                    }
                }
            };

            let mut params = encoder.flatten_params();
            if let Some(protos) = &prototypes {
                params.extend_from_slice(protos.data());
            }
            match optimizer.step(&mut params, &step.param_grads) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { index, value }) => {
                    abort = Some(format!(
                        "non-finite parameter gradient {value} at index {index}, epoch {epoch}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            let encoder_len = encoder.param_count();
            encoder.assign_params(&params[..encoder_len])?;
            if let Some(protos) = prototypes.as_mut() {
                protos.data_mut().copy_from_slice(&params[encoder_len..]);
            }

            buffers.push(&step.descriptors, &step.rectified);
            loss_sum += step.loss;
            steps += 1;
        }

        // Epoch diagnostics and evaluation.
        let (desc_spec, grad_spec) = buffers.spectra()?;
        let alignment = alignment_matrix(&desc_spec.basis, &grad_spec.basis)?;
        let mass = diagonal_mass(&alignment, ALIGNMENT_TOP_K.min(dim));
        let eval = evaluate(&encoder, data)?;
        let recall_of = |n: usize| {
            eval.recall
                .iter()
                .find(|(depth, _)| *depth == n.min(data.database_indices().len()))
                .map(|(_, r)| *r)
                .unwrap_or(0.0)
        };
        log.push(EpochRecord {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            desc_cond: desc_spec.condition_number,
            grad_cond: grad_spec.condition_number,
            recall1: recall_of(1),
            recall5: recall_of(5),
            recall10: recall_of(10),
            desc_grad_diag_mass: mass,
        });
        snapshots.push(EpochSnapshot {
            descriptor_spectrum: desc_spec,
            gradient_spectrum: grad_spec,
        });
        last_good_encoder = encoder.flatten_params();
        last_good_prototypes = prototypes.clone();
    }

    let completed = abort.is_none();
    if !completed {
        // Roll back to the last epoch-end checkpoint.
        encoder.assign_params(&last_good_encoder)?;
        prototypes = last_good_prototypes;
    }
    let final_accuracy = match &prototypes {
        Some(protos) => Some(classification_accuracy(&encoder, protos, data)?),
        None => None,
    };
    let queue_snapshot = grm
        .as_ref()
        .and_then(|module| module.queue())
        .filter(|queue| !queue.is_empty())
        .map(|queue| queue.snapshot());
    Ok(TrainOutcome {
        encoder,
        prototypes,
        log,
        snapshots,
        completed,
        abort,
        final_accuracy,
        queue_snapshot,
    })
}
