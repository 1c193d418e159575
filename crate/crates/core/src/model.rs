//! Metric-learning model pieces: pairwise losses with hand-derived
//! gradients, a small ReLU MLP encoder with explicit backprop, and the
//! optimizers that consume flattened parameter vectors.
//!
//! Losses operate on descriptor batches (rows) and return gradients of the
//! same shape, which is exactly the surface the rectifier intercepts.
//! Distances are squared Euclidean throughout. Hinge-type terms use
//! subgradient 0 at their kink.

use crate::error::{Error, Result};
use crate::linalg::{dot, squared_distance, Matrix};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// ──────────────────────────── similarity ───────────────────────────────

/// Squared Euclidean distance between two descriptors of equal length.
pub fn pair_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "pair_similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite descriptor".into()));
    }
    Ok(squared_distance(a, b))
}

// ─────────────────────────── contrastive ───────────────────────────────

/// One labeled pair of batch row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
}

fn check_pairs(descriptors: &Matrix, pairs: &[PairLabel]) -> Result<()> {
    if !descriptors.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptor batch".into()));
    }
    for p in pairs {
        if p.i >= descriptors.rows() || p.j >= descriptors.rows() {
            return Err(Error::InvalidBatch(format!(
                "pair ({}, {}) out of range for batch of {}",
                p.i,
                p.j,
                descriptors.rows()
            )));
        }
    }
    Ok(())
}

fn check_margin(margin: f64) -> Result<()> {
    if !margin.is_finite() || margin <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "margin must be positive, got {margin}"
        )));
    }
    Ok(())
}

/// Sum over pairs of `s` for positives and `max(margin − s, 0)` for
/// negatives, where `s` is the squared distance between the pair's
/// descriptors.
pub fn contrastive_loss(descriptors: &Matrix, pairs: &[PairLabel], margin: f64) -> Result<f64> {
    check_margin(margin)?;
    check_pairs(descriptors, pairs)?;
    let mut loss = 0.0;
    for p in pairs {
        let s = squared_distance(descriptors.row(p.i), descriptors.row(p.j));
        if p.positive {
            loss += s;
        } else {
            loss += (margin - s).max(0.0);
        }
    }
    Ok(loss)
}

/// Exact gradient of [`contrastive_loss`] with respect to the descriptors.
///
/// With `d = pᵢ − pⱼ`: a positive pair adds `2d` to row `i` and `−2d` to
/// row `j`; a negative pair inside the margin (`s < margin`) does the
/// opposite; a negative at or beyond the margin contributes nothing.
pub fn contrastive_grad(descriptors: &Matrix, pairs: &[PairLabel], margin: f64) -> Result<Matrix> {
    check_margin(margin)?;
    check_pairs(descriptors, pairs)?;
    let mut grad = Matrix::zeros(descriptors.rows(), descriptors.cols());
    for p in pairs {
        let s = squared_distance(descriptors.row(p.i), descriptors.row(p.j));
        let sign = if p.positive {
            1.0
        } else if s < margin {
            -1.0
        } else {
            continue;
        };
        for c in 0..descriptors.cols() {
            let d = descriptors.get(p.i, c) - descriptors.get(p.j, c);
            grad.set(p.i, c, grad.get(p.i, c) + sign * 2.0 * d);
            grad.set(p.j, c, grad.get(p.j, c) - sign * 2.0 * d);
        }
    }
    Ok(grad)
}

/// Gradient of a query's loss terms expressed as a weighted sum of
/// descriptor differences: `Σⱼ αⱼ (p_query − pⱼ)` over `(j, αⱼ)` pairs.
///
/// This is the form every pairwise loss gradient takes, which is why the
/// gradient lies in the span of the descriptors themselves.
pub fn pairwise_grad_decomposition(
    descriptors: &Matrix,
    query: usize,
    coefficients: &[(usize, f64)],
) -> Result<Vec<f64>> {
    if !descriptors.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptor batch".into()));
    }
    if query >= descriptors.rows() {
        return Err(Error::InvalidBatch(format!(
            "query {query} out of range for batch of {}",
            descriptors.rows()
        )));
    }
    let mut grad = vec![0.0; descriptors.cols()];
    for &(j, alpha) in coefficients {
        if j >= descriptors.rows() {
            return Err(Error::InvalidBatch(format!(
                "coefficient index {j} out of range for batch of {}",
                descriptors.rows()
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite coefficient {alpha}")));
        }
        for (c, g) in grad.iter_mut().enumerate() {
            *g += alpha * (descriptors.get(query, c) - descriptors.get(j, c));
        }
    }
    Ok(grad)
}

// ───────────────────────────── triplet ─────────────────────────────────

/// Anchor / positive / negative row indices into a descriptor batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn check_triplets(descriptors: &Matrix, triplets: &[Triplet]) -> Result<()> {
    if !descriptors.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptor batch".into()));
    }
    for t in triplets {
        if t.anchor >= descriptors.rows()
            || t.positive >= descriptors.rows()
            || t.negative >= descriptors.rows()
        {
            return Err(Error::InvalidBatch(format!(
                "triplet ({}, {}, {}) out of range for batch of {}",
                t.anchor,
                t.positive,
                t.negative,
                descriptors.rows()
            )));
        }
    }
    Ok(())
}

/// Sum over triplets of `max(0, s(a, p) − s(a, n) + margin)`.
pub fn triplet_loss(descriptors: &Matrix, triplets: &[Triplet], margin: f64) -> Result<f64> {
    check_margin(margin)?;
    check_triplets(descriptors, triplets)?;
    let mut loss = 0.0;
    for t in triplets {
        let sp = squared_distance(descriptors.row(t.anchor), descriptors.row(t.positive));
        let sn = squared_distance(descriptors.row(t.anchor), descriptors.row(t.negative));
        loss += (sp - sn + margin).max(0.0);
    }
    Ok(loss)
}

/// Exact gradient of [`triplet_loss`]; inactive triplets (hinge at or below
/// zero) contribute nothing.
pub fn triplet_grad(descriptors: &Matrix, triplets: &[Triplet], margin: f64) -> Result<Matrix> {
    check_margin(margin)?;
    check_triplets(descriptors, triplets)?;
    let mut grad = Matrix::zeros(descriptors.rows(), descriptors.cols());
    for t in triplets {
        let sp = squared_distance(descriptors.row(t.anchor), descriptors.row(t.positive));
        let sn = squared_distance(descriptors.row(t.anchor), descriptors.row(t.negative));
        if sp - sn + margin <= 0.0 {
            continue;
        }
        for c in 0..descriptors.cols() {
            let a = descriptors.get(t.anchor, c);
            let p = descriptors.get(t.positive, c);
            let n = descriptors.get(t.negative, c);
            grad.set(t.anchor, c, grad.get(t.anchor, c) + 2.0 * (n - p));
            grad.set(t.positive, c, grad.get(t.positive, c) - 2.0 * (a - p));
            grad.set(t.negative, c, grad.get(t.negative, c) + 2.0 * (a - n));
        }
    }
    Ok(grad)
}

// ──────────────────────────── prototype ────────────────────────────────

fn check_prototype_args(
    descriptors: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    temperature: f64,
) -> Result<()> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if descriptors.cols() != prototypes.cols() {
        return Err(Error::DimensionMismatch {
            context: "prototype descriptor dim",
            expected: prototypes.cols(),
            actual: descriptors.cols(),
        });
    }
    if labels.len() != descriptors.rows() {
        return Err(Error::DimensionMismatch {
            context: "prototype labels",
            expected: descriptors.rows(),
            actual: labels.len(),
        });
    }
    if descriptors.rows() == 0 || prototypes.rows() == 0 {
        return Err(Error::InvalidBatch("empty descriptors or prototypes".into()));
    }
    if !descriptors.is_finite() || !prototypes.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptors or prototypes".into()));
    }
    for &l in labels {
        if l >= prototypes.rows() {
            return Err(Error::InvalidBatch(format!(
                "label {l} out of range for {} prototypes",
                prototypes.rows()
            )));
        }
    }
    Ok(())
}

/// Per-row class probabilities `softmax_k(−γ ‖f − m_k‖²)`, computed with the
/// usual max-shift for stability.
fn prototype_probs(descriptors: &Matrix, prototypes: &Matrix, temperature: f64) -> Matrix {
    let (n, k) = (descriptors.rows(), prototypes.rows());
    let mut probs = Matrix::zeros(n, k);
    for r in 0..n {
        let row = descriptors.row(r);
        let logits: Vec<f64> = (0..k)
            .map(|c| -temperature * squared_distance(row, prototypes.row(c)))
            .collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (c, &l) in logits.iter().enumerate() {
            let e = (l - m).exp();
            probs.set(r, c, e);
            z += e;
        }
        for c in 0..k {
            probs.set(r, c, probs.get(r, c) / z);
        }
    }
    probs
}

/// Mean negative log-likelihood of each row's true class under
/// `softmax_k(−γ ‖f − m_k‖²)`.
pub fn prototype_loss(
    descriptors: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    temperature: f64,
) -> Result<f64> {
    check_prototype_args(descriptors, labels, prototypes, temperature)?;
    let probs = prototype_probs(descriptors, prototypes, temperature);
    let n = descriptors.rows();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs.get(r, y).ln();
    }
    Ok(loss / n as f64)
}

/// Exact gradients of [`prototype_loss`] with respect to descriptors and
/// prototypes, in that order.
///
/// With `w_k = p_k − 1[k = y]` per row: the descriptor gradient is
/// `(2γ/n) Σ_k w_k (m_k − f)` and prototype `k` accumulates
/// `(2γ/n) w_k (f − m_k)`.
pub fn prototype_grad(
    descriptors: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    temperature: f64,
) -> Result<(Matrix, Matrix)> {
    check_prototype_args(descriptors, labels, prototypes, temperature)?;
    let probs = prototype_probs(descriptors, prototypes, temperature);
    let (n, k, c) = (descriptors.rows(), prototypes.rows(), descriptors.cols());
    let scale = 2.0 * temperature / n as f64;
    let mut dgrad = Matrix::zeros(n, c);
    let mut pgrad = Matrix::zeros(k, c);
    for (r, &y) in labels.iter().enumerate() {
        for cls in 0..k {
            let w = probs.get(r, cls) - if cls == y { 1.0 } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            for col in 0..c {
                let diff = descriptors.get(r, col) - prototypes.get(cls, col);
                dgrad.set(r, col, dgrad.get(r, col) - scale * w * diff);
                pgrad.set(cls, col, pgrad.get(cls, col) + scale * w * diff);
            }
        }
    }
    Ok((dgrad, pgrad))
}

// ─────────────────────── descriptor normalization ──────────────────────

/// Scales each row to unit Euclidean norm; returns the normalized batch and
/// the original norms. Rows of zero norm cannot be normalized.
pub fn l2_normalize_rows(descriptors: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if !descriptors.is_finite() {
        return Err(Error::InvalidInput("non-finite descriptor batch".into()));
    }
    let mut out = descriptors.clone();
    let mut norms = Vec::with_capacity(descriptors.rows());
    for r in 0..descriptors.rows() {
        let norm = dot(descriptors.row(r), descriptors.row(r)).sqrt();
        if norm == 0.0 {
            return Err(Error::NumericalFailure(format!(
                "cannot normalize zero descriptor at row {r}"
            )));
        }
        for v in out.row_mut(r) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pulls a gradient taken with respect to normalized rows back to the raw
/// rows: `g_raw = (g − n̂ (n̂ · g)) / ‖p‖` with `n̂` the normalized row.
pub fn l2_normalize_backward(
    normalized: &Matrix,
    norms: &[f64],
    grad: &Matrix,
) -> Result<Matrix> {
    if normalized.rows() != grad.rows() || normalized.cols() != grad.cols() {
        return Err(Error::DimensionMismatch {
            context: "l2_normalize_backward grad",
            expected: normalized.rows() * normalized.cols(),
            actual: grad.rows() * grad.cols(),
        });
    }
    if norms.len() != normalized.rows() {
        return Err(Error::DimensionMismatch {
            context: "l2_normalize_backward norms",
            expected: normalized.rows(),
            actual: norms.len(),
        });
    }
    let mut out = Matrix::zeros(grad.rows(), grad.cols());
    for r in 0..grad.rows() {
        let unit = normalized.row(r);
        let g = grad.row(r);
        let along = dot(unit, g);
        let inv = 1.0 / norms[r];
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (g[c] - unit[c] * along) * inv;
        }
    }
    Ok(out)
}

// ─────────────────────────────── MLP ───────────────────────────────────

#[derive(Debug, Clone)]
struct Layer {
    weight: Matrix, // out x in
    bias: Vec<f64>,
}

/// Fully connected encoder: ReLU on hidden layers, linear output.
///
/// Weights initialize He-style on hidden layers and Xavier-style on the
/// output layer, biases at zero; the draw order is fixed so a seed pins the
/// parameters bit-for-bit.
#[derive(Debug, Clone)]
pub struct MlpEncoder {
    layers: Vec<Layer>,
}

/// Cached activations from [`MlpEncoder::forward`]; index 0 is the input,
/// the last entry the descriptors.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Matrix>,
}

impl ForwardPass {
    pub fn descriptors(&self) -> &Matrix {
        self.activations.last().expect("forward pass is nonempty")
    }
}

/// Per-layer parameter gradients, same shapes as the encoder's layers.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    /// Concatenates layer by layer, weight row-major then bias, matching
    /// [`MlpEncoder::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "encoder needs at least input and output sizes, got {sizes:?}"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig(format!(
            "layer sizes must be >= 1, got {sizes:?}"
        )));
    }
    Ok(())
}

impl MlpEncoder {
    /// Seed-deterministic random initialization for the given layer widths
    /// (`[input, hidden..., output]`).
    pub fn random(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        check_sizes(sizes)?;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let std = if last {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
            layers.push(Layer {
                weight,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(MlpEncoder { layers })
    }

    /// Builds from explicit `(weight, bias)` pairs; shapes must chain.
    pub fn from_layers(params: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        for (idx, (w, b)) in params.iter().enumerate() {
            if w.rows() == 0 || w.cols() == 0 {
                return Err(Error::InvalidConfig(format!("layer {idx} has a zero dim")));
            }
            if b.len() != w.rows() {
                return Err(Error::DimensionMismatch {
                    context: "MlpEncoder::from_layers bias",
                    expected: w.rows(),
                    actual: b.len(),
                });
            }
            if idx > 0 && w.cols() != params[idx - 1].0.rows() {
                return Err(Error::DimensionMismatch {
                    context: "MlpEncoder::from_layers chain",
                    expected: params[idx - 1].0.rows(),
                    actual: w.cols(),
                });
            }
        }
        Ok(MlpEncoder {
            layers: params
                .into_iter()
                .map(|(weight, bias)| Layer { weight, bias })
                .collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.rows()
    }

    /// Widths as `[input, hidden..., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Read access to one layer's parameters.
    pub fn layer_params(&self, l: usize) -> (&Matrix, &[f64]) {
        (&self.layers[l].weight, &self.layers[l].bias)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Concatenates all parameters layer by layer, weight row-major then
    /// bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Writes a flat vector (in [`Self::flatten_params`] order) back into
    /// the layers.
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "MlpEncoder::assign_params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let wn = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        Ok(())
    }

    /// Runs the batch through the network, caching every activation for the
    /// backward pass.
    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "MlpEncoder::forward",
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        if !inputs.is_finite() {
            return Err(Error::InvalidInput("non-finite input batch".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("nonempty");
            let n = prev.rows();
            let out_dim = layer.weight.rows();
            let mut next = Matrix::zeros(n, out_dim);
            for r in 0..n {
                let x = prev.row(r);
                let row = next.row_mut(r);
                for (o, slot) in row.iter_mut().enumerate() {
                    *slot = dot(layer.weight.row(o), x) + layer.bias[o];
                }
            }
            if idx + 1 < self.layers.len() {
                for v in next.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(next);
        }
        Ok(ForwardPass { activations })
    }

    /// Backpropagates a descriptor gradient through the cached pass.
    ///
    /// The pass must come from this encoder (layer count and widths are
    /// checked, so a cache from a differently shaped encoder is rejected as
    /// stale).
    pub fn backward(&self, pass: &ForwardPass, desc_grad: &Matrix) -> Result<ParamGrads> {
        let l = self.layers.len();
        if pass.activations.len() != l + 1 {
            return Err(Error::InvalidInput(
                "stale forward pass: layer count differs".into(),
            ));
        }
        let n = pass.activations[0].rows();
        let sizes = self.layer_sizes();
        for (idx, act) in pass.activations.iter().enumerate() {
            if act.rows() != n || act.cols() != sizes[idx] {
                return Err(Error::InvalidInput(format!(
                    "stale forward pass: activation {idx} is {}x{}, expected {}x{}",
                    act.rows(),
                    act.cols(),
                    n,
                    sizes[idx]
                )));
            }
        }
        if desc_grad.rows() != n || desc_grad.cols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "MlpEncoder::backward",
                expected: self.output_dim(),
                actual: desc_grad.cols(),
            });
        }
        if !desc_grad.is_finite() {
            return Err(Error::InvalidInput("non-finite descriptor gradient".into()));
        }

        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        let mut delta = desc_grad.clone();
        for idx in (0..l).rev() {
            let input_act = &pass.activations[idx];
            let layer = &self.layers[idx];
            let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());

            // dW = deltaᵀ · input activations, db = column sums of delta.
            let mut dw = Matrix::zeros(out_dim, in_dim);
            let mut db = vec![0.0; out_dim];
            for r in 0..n {
                let d = delta.row(r);
                let x = input_act.row(r);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    db[o] += dv;
                    let row = dw.row_mut(o);
                    for (c, &xv) in x.iter().enumerate() {
                        row[c] += dv * xv;
                    }
                }
            }
            weights.push(dw);
            biases.push(db);

            if idx > 0 {
                // delta_prev = (delta · W) masked by the ReLU that produced
                // input_act (its zeros are exactly the clamped units).
                let mut prev = Matrix::zeros(n, in_dim);
                for r in 0..n {
                    let d = delta.row(r);
                    let mask = input_act.row(r);
                    let row = prev.row_mut(r);
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        let w = layer.weight.row(o);
                        for (c, slot) in row.iter_mut().enumerate() {
                            *slot += dv * w[c];
                        }
                    }
                    for (c, slot) in row.iter_mut().enumerate() {
                        if mask[c] == 0.0 {
                            *slot = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        weights.reverse();
        biases.reverse();
        Ok(ParamGrads { weights, biases })
    }
}

// ──────────────────────────── optimizers ───────────────────────────────

/// Update rule selector. Hyperparameters ride along with the variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn momentum_default() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::SgdMomentum { momentum } => {
                if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
                    Err(Error::InvalidConfig(format!(
                        "momentum must lie in [0, 1), got {momentum}"
                    )))
                } else {
                    Ok(())
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !b.is_finite() || !(0.0..1.0).contains(&b) {
                        return Err(Error::InvalidConfig(format!(
                            "{name} must lie in [0, 1), got {b}"
                        )));
                    }
                }
                if !epsilon.is_finite() || epsilon <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "epsilon must be positive, got {epsilon}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// First-order optimizer over one flat parameter vector.
///
/// A step either applies in full or aborts without touching parameters or
/// internal state; any non-finite gradient entry aborts with its index.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    velocity: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        kind.validate()?;
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            velocity: Vec::new(),
            second_moment: Vec::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Adjusts the learning rate (used by epoch-level schedules).
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.learning_rate = lr;
        Ok(())
    }

    /// Applies one update in place. The parameter length is fixed by the
    /// first call; later mismatches are rejected.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                context: "Optimizer::step",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if self.steps > 0 && !self.velocity.is_empty() && self.velocity.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "Optimizer::step state",
                expected: self.velocity.len(),
                actual: params.len(),
            });
        }
        for (i, &g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { index: i, value: g });
            }
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if self.velocity.is_empty() {
                    self.velocity = vec![0.0; params.len()];
                }
                for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if self.velocity.is_empty() {
                    self.velocity = vec![0.0; params.len()];
                    self.second_moment = vec![0.0; params.len()];
                }
                let t = (self.steps + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    let m = &mut self.velocity[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    let v = &mut self.second_moment[i];
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn mat(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    // ── losses ──

    #[test]
    fn similarity_hand_case() {
        assert_eq!(pair_similarity(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            pair_similarity(&[1.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            pair_similarity(&[f64::NAN], &[0.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn contrastive_loss_frozen_cases() {
        let d = mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let pos = [PairLabel { i: 0, j: 1, positive: true }];
        assert_eq!(contrastive_loss(&d, &pos, 1.0).unwrap(), 1.0);

        let a = 0.2_f64.sqrt();
        let d = mat(&[vec![a, 0.0], vec![0.0, 0.0]]);
        let neg = [PairLabel { i: 0, j: 1, positive: false }];
        assert!((contrastive_loss(&d, &neg, 1.0).unwrap() - 0.8).abs() < 1e-12);

        // Negative at distance >= margin contributes nothing.
        let d = mat(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(contrastive_loss(&d, &neg, 1.0).unwrap(), 0.0);
        let g = contrastive_grad(&d, &neg, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_grad_frozen_case() {
        let d = mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let pairs = [PairLabel { i: 0, j: 1, positive: true }];
        let g = contrastive_grad(&d, &pairs, 1.0).unwrap();
        assert_eq!(g.row(0), &[2.0, 0.0]);
        assert_eq!(g.row(1), &[-2.0, 0.0]);

        // Active negative pushes apart: signs flip.
        let pairs = [PairLabel { i: 0, j: 1, positive: false }];
        let d = mat(&[vec![0.1, 0.0], vec![0.0, 0.0]]);
        let g = contrastive_grad(&d, &pairs, 1.0).unwrap();
        assert!((g.get(0, 0) + 0.2).abs() < 1e-15);
        assert!((g.get(1, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn contrastive_kink_uses_zero_subgradient() {
        // Distance exactly at the margin: contribution and gradient both 0.
        let d = mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let neg = [PairLabel { i: 0, j: 1, positive: false }];
        assert_eq!(contrastive_loss(&d, &neg, 1.0).unwrap(), 0.0);
        let g = contrastive_grad(&d, &neg, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_rejects_bad_pairs() {
        let d = mat(&[vec![1.0, 0.0]]);
        let pairs = [PairLabel { i: 0, j: 3, positive: true }];
        assert!(matches!(
            contrastive_loss(&d, &pairs, 1.0),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            contrastive_loss(&d, &[], 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn pairwise_decomposition_matches_contrastive() {
        // One positive + one active negative against the same query: the
        // loss gradient equals Σ α_j (p_q − p_j) with α = +2 / −2.
        let d = mat(&[
            vec![0.3, -0.2, 0.5],
            vec![0.1, 0.4, -0.3],
            vec![-0.2, 0.2, 0.1],
        ]);
        let pairs = [
            PairLabel { i: 0, j: 1, positive: true },
            PairLabel { i: 0, j: 2, positive: false },
        ];
        let full = contrastive_grad(&d, &pairs, 10.0).unwrap();
        let decomp =
            pairwise_grad_decomposition(&d, 0, &[(1, 2.0), (2, -2.0)]).unwrap();
        for c in 0..3 {
            assert!((full.get(0, c) - decomp[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn triplet_hand_case() {
        let d = mat(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        // s(a,p) = 1, s(a,n) = 4: inactive at margin 1, active at margin 4.
        assert_eq!(triplet_loss(&d, &t, 1.0).unwrap(), 0.0);
        assert!(triplet_grad(&d, &t, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(triplet_loss(&d, &t, 4.0).unwrap(), 1.0);
        let g = triplet_grad(&d, &t, 4.0).unwrap();
        assert_eq!(g.row(0), &[-2.0, 4.0]);
        assert_eq!(g.row(1), &[2.0, 0.0]);
        assert_eq!(g.row(2), &[0.0, -4.0]);
    }

    #[test]
    fn prototype_frozen_cases() {
        // Equidistant from two prototypes: probability 1/2, loss log 2.
        let d = mat(&[vec![0.0, 0.0]]);
        let protos = mat(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let loss = prototype_loss(&d, &[0], &protos, 1.0).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);

        // Single class, prototype at the descriptor: certain, loss 0,
        // gradients 0.
        let protos = mat(&[vec![0.0, 0.0]]);
        let loss = prototype_loss(&d, &[0], &protos, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        let (dg, pg) = prototype_grad(&d, &[0], &protos, 1.0).unwrap();
        assert!(dg.data().iter().all(|&v| v == 0.0));
        assert!(pg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prototype_rejects_bad_args() {
        let d = mat(&[vec![0.0, 0.0]]);
        let protos = mat(&[vec![1.0, 0.0]]);
        assert!(matches!(
            prototype_loss(&d, &[1], &protos, 1.0),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            prototype_loss(&d, &[0], &protos, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            prototype_loss(&d, &[0, 0], &protos, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    // Central finite differences of `f` at `x`, step 1e-6.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() <= 1e-5 * scale,
                "{what} entry {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, c) = (5, 4);
        for _ in 0..10 {
            let mut flat: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pairs = [
                PairLabel { i: 0, j: 1, positive: true },
                PairLabel { i: 0, j: 2, positive: false },
                PairLabel { i: 3, j: 4, positive: false },
            ];
            let margin = 50.0; // far from any kink for these coordinates
            let batch = Matrix::from_flat(n, c, flat.clone()).unwrap();
            let analytic = contrastive_grad(&batch, &pairs, margin).unwrap();
            let numeric = fd_grad(
                |x| {
                    let b = Matrix::from_flat(n, c, x.to_vec()).unwrap();
                    contrastive_loss(&b, &pairs, margin).unwrap()
                },
                &flat,
            );
            assert_close(analytic.data(), &numeric, "contrastive");

            let triplets = [
                Triplet { anchor: 0, positive: 1, negative: 2 },
                Triplet { anchor: 3, positive: 4, negative: 0 },
            ];
            let analytic = triplet_grad(&batch, &triplets, margin).unwrap();
            let numeric = fd_grad(
                |x| {
                    let b = Matrix::from_flat(n, c, x.to_vec()).unwrap();
                    triplet_loss(&b, &triplets, margin).unwrap()
                },
                &flat,
            );
            assert_close(analytic.data(), &numeric, "triplet");

            // Prototype: differentiate descriptors and prototypes jointly.
            let k = 3;
            let labels = [0usize, 1, 2, 0, 1];
            let protos: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            flat.extend_from_slice(&protos);
            let split = n * c;
            let (dg, pg) = prototype_grad(
                &Matrix::from_flat(n, c, flat[..split].to_vec()).unwrap(),
                &labels,
                &Matrix::from_flat(k, c, flat[split..].to_vec()).unwrap(),
                0.7,
            )
            .unwrap();
            let mut analytic = dg.data().to_vec();
            analytic.extend_from_slice(pg.data());
            let numeric = fd_grad(
                |x| {
                    prototype_loss(
                        &Matrix::from_flat(n, c, x[..split].to_vec()).unwrap(),
                        &labels,
                        &Matrix::from_flat(k, c, x[split..].to_vec()).unwrap(),
                        0.7,
                    )
                    .unwrap()
                },
                &flat,
            );
            assert_close(&analytic, &numeric, "prototype");
            flat.truncate(split);
        }
    }

    // ── normalization ──

    #[test]
    fn normalize_rows_and_backward() {
        let d = mat(&[vec![3.0, 4.0], vec![0.0, 2.0]]);
        let (unit, norms) = l2_normalize_rows(&d).unwrap();
        assert!((unit.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((unit.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(norms, vec![5.0, 2.0]);

        let zero = mat(&[vec![0.0, 0.0]]);
        assert!(matches!(
            l2_normalize_rows(&zero),
            Err(Error::NumericalFailure(_))
        ));

        // Finite-difference check through normalize -> fixed linear form.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let coeffs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let loss = |x: &[f64]| {
            let m = Matrix::from_flat(1, 3, x.to_vec()).unwrap();
            let (u, _) = l2_normalize_rows(&m).unwrap();
            dot(u.row(0), &coeffs)
        };
        let m = Matrix::from_flat(1, 3, x.clone()).unwrap();
        let (u, norms) = l2_normalize_rows(&m).unwrap();
        let gn = Matrix::from_flat(1, 3, coeffs.clone()).unwrap();
        let analytic = l2_normalize_backward(&u, &norms, &gn).unwrap();
        let numeric = fd_grad(loss, &x);
        assert_close(analytic.data(), &numeric, "normalize");
    }

    // ── MLP ──

    #[test]
    fn forward_single_layer_hand_case() {
        let enc = MlpEncoder::from_layers(vec![(
            mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            vec![0.1, -0.1],
        )])
        .unwrap();
        let pass = enc.forward(&mat(&[vec![1.0, 1.0]])).unwrap();
        let d = pass.descriptors();
        assert!((d.get(0, 0) - 3.1).abs() < 1e-15);
        assert!((d.get(0, 1) - 6.9).abs() < 1e-15);
    }

    #[test]
    fn forward_applies_relu_on_hidden_only() {
        let enc = MlpEncoder::from_layers(vec![
            (mat(&[vec![1.0], vec![-1.0]]), vec![0.0, 0.0]),
            (mat(&[vec![1.0, 1.0]]), vec![0.0]),
        ])
        .unwrap();
        // x = 2: hidden pre-activations (2, -2) -> relu (2, 0) -> output 2.
        let pass = enc.forward(&mat(&[vec![2.0]])).unwrap();
        assert_eq!(pass.descriptors().get(0, 0), 2.0);
        // x = -2: hidden (-2, 2) -> (0, 2) -> output 2.
        let pass = enc.forward(&mat(&[vec![-2.0]])).unwrap();
        assert_eq!(pass.descriptors().get(0, 0), 2.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let enc = MlpEncoder::random(&[3, 5, 2], &mut rng).unwrap();
        let inputs = {
            let mut m = Matrix::zeros(4, 3);
            for v in m.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            m
        };
        // Scalar objective: half the squared norm of the descriptors, so the
        // descriptor gradient is the descriptors themselves.
        let objective = |enc: &MlpEncoder| {
            let d = enc.forward(&inputs).unwrap();
            0.5 * d.descriptors().data().iter().map(|v| v * v).sum::<f64>()
        };
        let pass = enc.forward(&inputs).unwrap();
        let grads = enc.backward(&pass, pass.descriptors()).unwrap();
        let analytic = grads.flatten();

        let base = enc.flatten_params();
        let mut probe_enc = enc.clone();
        let numeric = fd_grad(
            |x| {
                probe_enc.assign_params(x).unwrap();
                objective(&probe_enc)
            },
            &base,
        );
        assert_close(&analytic, &numeric, "mlp params");
    }

    #[test]
    fn backward_rejects_stale_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = MlpEncoder::random(&[3, 4, 2], &mut rng).unwrap();
        let b = MlpEncoder::random(&[3, 5, 2], &mut rng).unwrap();
        let pass = a.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            b.backward(&pass, &Matrix::zeros(2, 2)),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            a.backward(&pass, &Matrix::zeros(3, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = MlpEncoder::random(&[4, 6, 3], &mut rng).unwrap();
        let flat = enc.flatten_params();
        assert_eq!(flat.len(), enc.param_count());
        let mut other = MlpEncoder::random(&[4, 6, 3], &mut rng).unwrap();
        other.assign_params(&flat).unwrap();
        assert_eq!(other.flatten_params(), flat);
        assert_eq!(enc.layer_sizes(), vec![4, 6, 3]);
    }

    #[test]
    fn encoder_init_is_seed_deterministic() {
        let a = MlpEncoder::random(&[4, 6, 3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = MlpEncoder::random(&[4, 6, 3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (x, y) in a.flatten_params().iter().zip(b.flatten_params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    // ── optimizers ──

    #[test]
    fn sgd_frozen_case() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[1.0, 0.0]).unwrap();
        assert_eq!(p, vec![-0.1, 0.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt =
            Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, 1.0).unwrap();
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap(); // v = 1, p = -1
        opt.step(&mut p, &[1.0]).unwrap(); // v = 1.5, p = -2.5
        assert!((p[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.01).unwrap();
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[0.5, -3.0]).unwrap();
        // Bias correction makes the first step lr * g/|g| up to epsilon.
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-7);
        assert!((p[1] - (1.0 + 0.01)).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let kind = OptimizerKind::SgdMomentum { momentum: 0.9 };
        // Reference: two clean steps.
        let mut clean = Optimizer::new(kind, 0.1).unwrap();
        let mut p_clean = vec![1.0, 2.0];
        clean.step(&mut p_clean, &[0.3, -0.2]).unwrap();
        clean.step(&mut p_clean, &[0.1, 0.4]).unwrap();

        // Same two steps with a rejected step in between.
        let mut opt = Optimizer::new(kind, 0.1).unwrap();
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[0.3, -0.2]).unwrap();
        let before = p.clone();
        let err = opt.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        match err {
            Error::NonFiniteGradient { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(p, before);
        opt.step(&mut p, &[0.1, 0.4]).unwrap();
        for (a, b) in p.iter().zip(&p_clean) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn optimizer_validation() {
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0).is_err());
        assert!(Optimizer::new(OptimizerKind::SgdMomentum { momentum: 1.0 }, 0.1).is_err());
        assert!(Optimizer::new(
            OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 0.0 },
            0.1
        )
        .is_err());
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = vec![0.0];
        assert!(matches!(
            opt.step(&mut p, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
