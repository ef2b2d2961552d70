//! Training objectives: supervised contrastive loss, its interpolated
//! variants (batch and memory), the pseudo-label classification loss, the
//! joint objective, and the bootstrapped fine-tuning loss.
//!
//! Every loss returns its scalar value together with the exact gradient with
//! respect to its direct inputs: the rows of the unit-embedding matrix for
//! contrastive losses, the logit rows for classification losses. Gradients
//! into shared encoder parameters are obtained by feeding these upstream
//! gradients to [`crate::model::backward`].
//!
//! Conventions shared by the contrastive losses:
//! - an anchor's positives for class `c` are the candidate rows whose
//!   dominant label equals `c`;
//! - the per-anchor normalizer is the number of positives actually used;
//! - a term with zero weight or zero positives contributes nothing, and an
//!   anchor with no live term is excluded from the batch mean;
//! - memory rows are constants: no gradient flows into them.

use crate::error::{Error, Result};
use crate::math::{axpy, dot, scaled_softmax, Matrix};
use crate::membank::MemorySnapshot;

/// Label bookkeeping for one mixed view: the two source classes, the mixing
/// coefficient, and the dominant class used for partner selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedLabel {
    pub label_a: usize,
    pub label_b: usize,
    pub lambda: f64,
    pub dominant: usize,
}

impl MixedLabel {
    pub fn new(label_a: usize, label_b: usize, lambda: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&lambda));
        MixedLabel {
            label_a,
            label_b,
            lambda,
            dominant: if lambda >= 0.5 { label_a } else { label_b },
        }
    }

    /// An unmixed label (lambda = 1, both sources the same class).
    pub fn plain(label: usize) -> Self {
        MixedLabel::new(label, label, 1.0)
    }
}

/// A two-view contrastive batch: unit-norm embedding rows, one mixed label
/// per row, and the sibling-view pairing (row `i` and row `view_pairing[i]`
/// originate from the same source sample before mixing).
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub unit_rows: Matrix,
    pub labels: Vec<MixedLabel>,
    pub view_pairing: Vec<usize>,
}

/// Scalar loss value and gradient w.r.t. the loss's direct input rows.
#[derive(Debug, Clone)]
pub struct LossOut {
    pub value: f64,
    pub grad: Matrix,
}

impl LossOut {
    fn zero(rows: usize, cols: usize) -> Self {
        LossOut {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }
}

/// How batch and memory contrastive terms combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineMode {
    /// Plain sum of the two terms.
    #[default]
    Sum,
    /// Average of the two terms; reported to ease convergence when training
    /// contrastive-only.
    Mean,
}

/// Per-anchor weighted class terms, zero weights dropped.
fn anchor_terms(label: &MixedLabel) -> Vec<(usize, f64)> {
    let mut terms = Vec::with_capacity(2);
    if label.lambda > 0.0 {
        terms.push((label.label_a, label.lambda));
    }
    if label.lambda < 1.0 {
        terms.push((label.label_b, 1.0 - label.lambda));
    }
    terms
}

/// Contrastive loss of anchors against the other rows of the same batch,
/// with self-exclusion. Returns `Err(DegenerateBatch)` when no anchor has a
/// usable positive.
fn batch_contrastive(
    z: &Matrix,
    terms: &[Vec<(usize, f64)>],
    dominants: &[usize],
    tau: f64,
) -> Result<LossOut> {
    assert!(tau > 0.0, "temperature must be positive");
    let n = z.rows();
    let dim = z.cols();
    let mut grad = Matrix::zeros(n, dim);
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut sims = vec![0.0; n];
    let mut coeff = vec![0.0; n];

    for i in 0..n {
        let zi = z.row(i);
        let mut max_sim = f64::NEG_INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            sims[k] = dot(zi, z.row(k));
            max_sim = max_sim.max(sims[k]);
        }
        if !max_sim.is_finite() {
            continue; // n == 1: no candidates at all
        }
        let mut expsum = 0.0;
        for k in 0..n {
            if k != i {
                coeff[k] = ((sims[k] - max_sim) / tau).exp();
                expsum += coeff[k];
            }
        }
        let logsumexp = expsum.ln() + max_sim / tau;
        // coeff currently holds unnormalized softmax numerators.
        let inv = 1.0 / expsum;

        let mut anchor_value = 0.0;
        let mut weight_sum = 0.0;
        let mut adjust: Vec<(usize, f64)> = Vec::new();
        for &(class, weight) in &terms[i] {
            let mut pos_sum = 0.0;
            let mut pos_count = 0usize;
            for k in 0..n {
                if k != i && dominants[k] == class {
                    pos_sum += sims[k];
                    pos_count += 1;
                }
            }
            if pos_count == 0 {
                continue;
            }
            anchor_value += weight * (logsumexp - pos_sum / (pos_count as f64 * tau));
            weight_sum += weight;
            adjust.push((class, weight / (pos_count as f64 * tau)));
        }
        if weight_sum == 0.0 {
            continue;
        }
        valid += 1;
        total += anchor_value;

        // d(anchor)/d(sim_ik) = weight_sum * softmax_k / tau - positive pulls.
        for k in 0..n {
            if k == i {
                coeff[k] = 0.0;
                continue;
            }
            let mut c = weight_sum * coeff[k] * inv / tau;
            for &(class, pull) in &adjust {
                if dominants[k] == class {
                    c -= pull;
                }
            }
            coeff[k] = c;
        }
        // sim_ik = z_i . z_k: gradient flows into both rows.
        {
            let gi = grad.row_mut(i);
            for k in 0..n {
                if coeff[k] != 0.0 {
                    axpy(gi, z.row(k), coeff[k]);
                }
            }
        }
        for k in 0..n {
            if coeff[k] != 0.0 {
                axpy(grad.row_mut(k), zi, coeff[k]);
            }
        }
    }

    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let scale = 1.0 / valid as f64;
    grad.scale(scale);
    Ok(LossOut {
        value: total * scale,
        grad,
    })
}

/// Contrastive loss of anchors against memory rows (no self-exclusion).
/// Anchors without a matching memory label contribute zero; an all-zero
/// batch yields value 0 with zero gradients rather than an error.
fn memory_contrastive(
    z: &Matrix,
    terms: &[Vec<(usize, f64)>],
    memory: &MemorySnapshot,
    tau: f64,
) -> LossOut {
    assert!(tau > 0.0, "temperature must be positive");
    let n = z.rows();
    let dim = z.cols();
    if memory.is_empty() {
        return LossOut::zero(n, dim);
    }
    let m = memory.len();
    let mut grad = Matrix::zeros(n, dim);
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut sims = vec![0.0; m];
    let mut coeff = vec![0.0; m];

    for i in 0..n {
        let zi = z.row(i);
        let mut max_sim = f64::NEG_INFINITY;
        for (k, s) in sims.iter_mut().enumerate() {
            *s = dot(zi, memory.embeddings.row(k));
            max_sim = max_sim.max(*s);
        }
        let mut expsum = 0.0;
        for (c, &s) in coeff.iter_mut().zip(&sims) {
            *c = ((s - max_sim) / tau).exp();
            expsum += *c;
        }
        let logsumexp = expsum.ln() + max_sim / tau;
        let inv = 1.0 / expsum;

        let mut anchor_value = 0.0;
        let mut weight_sum = 0.0;
        let mut adjust: Vec<(usize, f64)> = Vec::new();
        for &(class, weight) in &terms[i] {
            let mut pos_sum = 0.0;
            let mut pos_count = 0usize;
            for (k, &s) in sims.iter().enumerate() {
                if memory.dominants[k] == class {
                    pos_sum += s;
                    pos_count += 1;
                }
            }
            if pos_count == 0 {
                continue;
            }
            anchor_value += weight * (logsumexp - pos_sum / (pos_count as f64 * tau));
            weight_sum += weight;
            adjust.push((class, weight / (pos_count as f64 * tau)));
        }
        if weight_sum == 0.0 {
            continue;
        }
        valid += 1;
        total += anchor_value;

        let gi = grad.row_mut(i);
        for k in 0..m {
            let mut c = weight_sum * coeff[k] * inv / tau;
            for &(class, pull) in &adjust {
                if memory.dominants[k] == class {
                    c -= pull;
                }
            }
            // Memory rows are constants: gradient only reaches the anchor.
            axpy(gi, memory.embeddings.row(k), c);
        }
    }

    if valid == 0 {
        return LossOut::zero(n, dim);
    }
    let scale = 1.0 / valid as f64;
    grad.scale(scale);
    LossOut {
        value: total * scale,
        grad,
    }
}

/// Supervised contrastive loss over a plain-labeled batch of unit rows.
pub fn scl_loss(z: &Matrix, labels: &[usize], tau: f64) -> Result<LossOut> {
    assert_eq!(z.rows(), labels.len());
    let terms: Vec<Vec<(usize, f64)>> = labels.iter().map(|&y| vec![(y, 1.0)]).collect();
    batch_contrastive(z, &terms, labels, tau)
}

/// Interpolated contrastive loss within the batch: each anchor's loss is the
/// lambda-weighted sum of two class-conditional evaluations, partners matched
/// by dominant label.
pub fn icl_mix_loss(batch: &ContrastBatch, tau: f64) -> Result<LossOut> {
    assert_eq!(batch.unit_rows.rows(), batch.labels.len());
    let terms: Vec<Vec<(usize, f64)>> = batch.labels.iter().map(anchor_terms).collect();
    let dominants: Vec<usize> = batch.labels.iter().map(|l| l.dominant).collect();
    batch_contrastive(&batch.unit_rows, &terms, &dominants, tau)
}

/// Interpolated contrastive loss of the batch against the memory bank.
/// Empty memory yields zero loss and zero gradients by contract.
pub fn icl_mem_loss(batch: &ContrastBatch, memory: &MemorySnapshot, tau: f64) -> LossOut {
    assert_eq!(batch.unit_rows.rows(), batch.labels.len());
    let terms: Vec<Vec<(usize, f64)>> = batch.labels.iter().map(anchor_terms).collect();
    memory_contrastive(&batch.unit_rows, &terms, memory, tau)
}

/// Combined interpolated contrastive loss: batch term plus memory term
/// (summed or averaged per `combine`).
pub fn icl_loss(
    batch: &ContrastBatch,
    memory: &MemorySnapshot,
    tau: f64,
    combine: CombineMode,
) -> Result<LossOut> {
    let mix = icl_mix_loss(batch, tau)?;
    let mem = icl_mem_loss(batch, memory, tau);
    let (value, mut grad) = (mix.value + mem.value, mix.grad);
    grad.add_scaled(&mem.grad, 1.0);
    let mut out = LossOut { value, grad };
    if combine == CombineMode::Mean {
        out.value *= 0.5;
        out.grad.scale(0.5);
    }
    Ok(out)
}

fn check_distribution(t: &[f64], classes: usize, row: usize) -> Result<()> {
    if t.len() != classes {
        return Err(Error::DimMismatch {
            context: "target length",
            expected: classes,
            got: t.len(),
        });
    }
    let sum: f64 = t.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || t.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidTarget { row, sum });
    }
    Ok(())
}

const LOG_FLOOR: f64 = 1e-12;

/// Interpolated cross-entropy against two soft targets per row:
/// `-lambda * ta . log(h) - (1 - lambda) * tb . log(h)` with `h` the
/// unit-temperature softmax of the logits, mean over rows. Probabilities are
/// floored at 1e-12 before the log.
pub fn ssl_loss(logits: &Matrix, targets: &[(Vec<f64>, Vec<f64>)], lambdas: &[f64]) -> Result<LossOut> {
    let n = logits.rows();
    let classes = logits.cols();
    assert_eq!(targets.len(), n);
    assert_eq!(lambdas.len(), n);
    let mut grad = Matrix::zeros(n, classes);
    let mut total = 0.0;
    for i in 0..n {
        let (ta, tb) = &targets[i];
        check_distribution(ta, classes, i)?;
        check_distribution(tb, classes, i)?;
        let lambda = lambdas[i];
        let h = scaled_softmax(logits.row(i), 1.0);
        let mut value = 0.0;
        let mut active_mass = 0.0;
        for c in 0..classes {
            let t = lambda * ta[c] + (1.0 - lambda) * tb[c];
            value -= t * h[c].max(LOG_FLOOR).ln();
            if h[c] > LOG_FLOOR {
                active_mass += t;
            }
        }
        total += value;
        let grow = grad.row_mut(i);
        for c in 0..classes {
            let t = lambda * ta[c] + (1.0 - lambda) * tb[c];
            let active = h[c] > LOG_FLOOR;
            grow[c] = h[c] * active_mass - if active { t } else { 0.0 };
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.scale(scale);
    Ok(LossOut {
        value: total * scale,
        grad,
    })
}

/// Joint objective: interpolated contrastive loss plus the pseudo-label
/// classification loss. Gradients stay separated by head (unit rows vs
/// logits); both flow into the shared encoder through
/// [`crate::model::backward`].
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub value: f64,
    pub icl_value: f64,
    pub ssl_value: f64,
    pub unit_grad: Matrix,
    pub logit_grad: Matrix,
}

pub fn moit_loss(
    batch: &ContrastBatch,
    memory: &MemorySnapshot,
    logits: &Matrix,
    targets: &[(Vec<f64>, Vec<f64>)],
    lambdas: &[f64],
    tau: f64,
    combine: CombineMode,
) -> Result<JointLoss> {
    let icl = icl_loss(batch, memory, tau, combine)?;
    let ssl = ssl_loss(logits, targets, lambdas)?;
    Ok(JointLoss {
        value: icl.value + ssl.value,
        icl_value: icl.value,
        ssl_value: ssl.value,
        unit_grad: icl.grad,
        logit_grad: ssl.grad,
    })
}

/// Bootstrapped fine-tuning loss: targets blend the original one-hot labels
/// (weight `delta`) with the model's hard predictions (weight `1 - delta`),
/// interpolated by the mixing coefficients.
pub fn bootstrap_loss(
    logits: &Matrix,
    labels: &[(usize, usize)],
    predictions: &[(usize, usize)],
    lambdas: &[f64],
    delta: f64,
) -> Result<LossOut> {
    assert!((0.0..=1.0).contains(&delta), "delta in [0, 1]");
    let classes = logits.cols();
    let targets: Vec<(Vec<f64>, Vec<f64>)> = labels
        .iter()
        .zip(predictions)
        .map(|(&(ya, yb), &(pa, pb))| {
            let mut ta = vec![0.0; classes];
            ta[ya] += delta;
            ta[pa] += 1.0 - delta;
            let mut tb = vec![0.0; classes];
            tb[yb] += delta;
            tb[pb] += 1.0 - delta;
            (ta, tb)
        })
        .collect();
    ssl_loss(logits, &targets, lambdas)
}
