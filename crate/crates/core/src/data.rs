//! Synthetic datasets, noise injection, two-view augmentation, and mixing.
//!
//! Datasets are Gaussian blobs in feature space: well separated by
//! construction so representation quality, noise detection, and robustness
//! trends are attributable to the training method rather than to the data.
//! Augmentation is an additive-jitter / coordinate-dropout / global-scale
//! stand-in with the same two-view structure used by the contrastive losses.
//!
//! # Dataset file format
//!
//! Plain text. Header line `moitdata v1, N, D, C`, then one CSV row per
//! sample: `x_0,...,x_{D-1},y,y_clean`. Floats are written with 17
//! significant digits so a write/read cycle is bit-stable.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::MixedLabel;
use crate::math::Matrix;
use crate::rng::{sample_lambda, Rng};

/// Which split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Feature vectors with (possibly noisy) training labels and the hidden
/// clean labels used only for evaluation and planted-noise bookkeeping.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    /// Training labels; may have been flipped by a noise injector.
    pub labels: Vec<usize>,
    /// Ground-truth labels, untouched by injectors.
    pub clean_labels: Vec<usize>,
    pub classes: usize,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// True where the training label differs from the clean label.
    pub fn noise_mask(&self) -> Vec<bool> {
        self.labels
            .iter()
            .zip(&self.clean_labels)
            .map(|(&y, &yc)| y != yc)
            .collect()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Deterministic stratified split: within each class (samples in dataset
    /// order), the trailing `test_fraction` rounds to the test set and the
    /// rest stays in train.
    pub fn assign_splits(&mut self, test_fraction: f64) {
        assert!((0.0..1.0).contains(&test_fraction));
        self.split = vec![Split::Train; self.len()];
        for c in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.clean_labels[i] == c).collect();
            let test_count = (members.len() as f64 * test_fraction).round() as usize;
            for &i in members.iter().rev().take(test_count) {
                self.split[i] = Split::Test;
            }
        }
    }
}

/// Two-view augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Additive Gaussian noise std.
    pub jitter_sigma: f64,
    /// Per-coordinate zeroing probability.
    pub drop_prob: f64,
    /// Multiplicative global scale, drawn uniformly in [lo, hi].
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            jitter_sigma: 0.0,
            drop_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    /// Jitter-only augmentation used for fine-tuning and plain baselines.
    pub fn jitter_only(sigma: f64) -> Self {
        AugmentConfig {
            jitter_sigma: sigma,
            drop_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma < 0.0 {
            return Err(Error::InvalidConfig("jitter_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must be in [0, 1)".into()));
        }
        if self.scale_lo > self.scale_hi {
            return Err(Error::InvalidConfig("scale_lo must be <= scale_hi".into()));
        }
        Ok(())
    }
}

/// Gaussian blob dataset: class centers drawn uniformly in
/// `[-center_spread, center_spread]^dim` with pairwise distance at least
/// `4 * cluster_sigma` (each center is redrawn up to 1000 times before
/// giving up), then `n_per_class` samples per class at `center + sigma * N(0, I)`.
/// Labels start clean. Deterministic in the seed.
pub fn make_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    center_spread: f64,
    cluster_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    assert!(classes > 0 && n_per_class > 0 && dim > 0);
    assert!(center_spread > 0.0 && cluster_sigma > 0.0);
    let mut rng = Rng::new(seed);
    let min_dist_sq = (4.0 * cluster_sigma) * (4.0 * cluster_sigma);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::CenterPackingFailed { class: c, attempts: 1000 });
            }
            let candidate: Vec<f64> = (0..dim)
                .map(|_| rng.uniform(-center_spread, center_spread))
                .collect();
            let ok = centers.iter().all(|existing| {
                let dist_sq: f64 = existing
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dist_sq >= min_dist_sq
            });
            if ok {
                centers.push(candidate);
                break;
            }
        }
    }

    let n = classes * n_per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..n_per_class {
            let row = features.row_mut(c * n_per_class + s);
            for (v, &mu) in row.iter_mut().zip(center) {
                *v = mu + cluster_sigma * rng.gaussian();
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features,
        clean_labels: labels.clone(),
        labels,
        classes,
        split: vec![Split::Train; n],
    })
}

/// Symmetric noise: each sample independently flips with probability `rate`
/// to a label drawn uniformly from the other `C - 1` classes. Clean labels
/// and features are untouched.
pub fn inject_symmetric(dataset: &mut Dataset, rate: f64, rng: &mut Rng) {
    assert!((0.0..=1.0).contains(&rate));
    let classes = dataset.classes;
    if classes < 2 {
        return;
    }
    for i in 0..dataset.len() {
        if rng.unit() < rate {
            let offset = 1 + rng.below(classes - 1);
            dataset.labels[i] = (dataset.clean_labels[i] + offset) % classes;
        }
    }
}

/// Circular-shift mapping within consecutive class groups of size
/// `group_size` (a group size of `classes`, or 0, shifts over all classes).
pub fn circular_group_mapping(classes: usize, group_size: usize) -> Vec<usize> {
    let group = if group_size == 0 { classes } else { group_size.min(classes) };
    (0..classes)
        .map(|c| {
            let start = (c / group) * group;
            let span = group.min(classes - start);
            if span <= 1 {
                c
            } else {
                start + ((c - start + 1) % span)
            }
        })
        .collect()
}

/// Asymmetric noise: samples whose class moves under `mapping` flip to
/// `mapping[y]` with probability `rate`; fixed points never flip.
pub fn inject_asymmetric(
    dataset: &mut Dataset,
    rate: f64,
    mapping: &[usize],
    rng: &mut Rng,
) -> Result<()> {
    assert!((0.0..=1.0).contains(&rate));
    if mapping.len() != dataset.classes {
        return Err(Error::InvalidMapping {
            class: mapping.len(),
            target: 0,
            classes: dataset.classes,
        });
    }
    for (c, &t) in mapping.iter().enumerate() {
        if t >= dataset.classes {
            return Err(Error::InvalidMapping {
                class: c,
                target: t,
                classes: dataset.classes,
            });
        }
    }
    for i in 0..dataset.len() {
        let y = dataset.labels[i];
        if mapping[y] != y && rng.unit() < rate {
            dataset.labels[i] = mapping[y];
        }
    }
    Ok(())
}

/// One augmented view. Draw order per view is fixed: per-coordinate drop
/// mask, then the global scale, then per-coordinate jitter.
fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        let keep = rng.unit() >= cfg.drop_prob;
        out.push(if keep { v } else { 0.0 });
    }
    let scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    for v in &mut out {
        *v = *v * scale + cfg.jitter_sigma * rng.gaussian();
    }
    out
}

/// Two independently augmented views of the same sample.
pub fn two_views(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    (augment(x, cfg, rng), augment(x, cfg, rng))
}

/// Elementwise convex combination `lambda * a + (1 - lambda) * b`.
pub fn mixup_pair(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            context: "mixup_pair",
            expected: a.len(),
            got: b.len(),
        });
    }
    debug_assert!((0.0..=1.0).contains(&lambda));
    Ok(a.iter().zip(b).map(|(&x, &y)| lambda * x + (1.0 - lambda) * y).collect())
}

/// A built training batch of mixed inputs ready for the forward pass.
#[derive(Debug, Clone)]
pub struct MixBatch {
    /// Mixed inputs, one row per view.
    pub inputs: Matrix,
    pub labels: Vec<MixedLabel>,
    /// Sibling-view index per row (row i and row view_pairing[i] come from
    /// the same source sample). Empty for single-view batches.
    pub view_pairing: Vec<usize>,
    /// Batch-local index of the source sample behind each row's first mix
    /// component.
    pub source_a: Vec<usize>,
    /// Batch-local index of the source behind the partner component.
    pub source_b: Vec<usize>,
}

/// Random permutation with no fixed point, by rejection.
fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(n >= 2, "derangement needs at least two elements");
    loop {
        let p = rng.permutation(n);
        if p.iter().enumerate().all(|(i, &pi)| pi != i) {
            return p;
        }
    }
}

/// Builds a two-view contrastive batch: two augmented views per source
/// sample (rows 2k and 2k+1), then every view is mixed with a partner view
/// chosen by a random derangement of the 2N rows, with one mixing
/// coefficient drawn per row.
pub fn build_contrast_batch(
    features: &[&[f64]],
    labels: &[usize],
    cfg: &AugmentConfig,
    alpha: f64,
    rng: &mut Rng,
) -> MixBatch {
    let n = features.len();
    assert!(n >= 2, "contrastive batch needs at least two sources");
    assert_eq!(labels.len(), n);

    let mut views: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    let mut view_label = Vec::with_capacity(2 * n);
    let mut view_source = Vec::with_capacity(2 * n);
    let mut view_pairing = Vec::with_capacity(2 * n);
    for (k, x) in features.iter().enumerate() {
        let (a, b) = two_views(x, cfg, rng);
        views.push(a);
        views.push(b);
        view_label.push(labels[k]);
        view_label.push(labels[k]);
        view_source.push(k);
        view_source.push(k);
        view_pairing.push(2 * k + 1);
        view_pairing.push(2 * k);
    }

    let partner = derangement(2 * n, rng);
    let mut inputs = Matrix::zeros(2 * n, features[0].len());
    let mut mixed_labels = Vec::with_capacity(2 * n);
    let mut source_a = Vec::with_capacity(2 * n);
    let mut source_b = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let lambda = sample_lambda(alpha, rng);
        let mixed = mixup_pair(&views[i], &views[partner[i]], lambda).expect("equal view dims");
        inputs.row_mut(i).copy_from_slice(&mixed);
        mixed_labels.push(MixedLabel::new(view_label[i], view_label[partner[i]], lambda));
        source_a.push(view_source[i]);
        source_b.push(view_source[partner[i]]);
    }
    MixBatch {
        inputs,
        labels: mixed_labels,
        view_pairing,
        source_a,
        source_b,
    }
}

/// Builds a single-view mixup batch (used by fine-tuning and the plain
/// baselines): one augmented view per source, mixed by a derangement.
pub fn build_mixup_batch(
    features: &[&[f64]],
    labels: &[usize],
    cfg: &AugmentConfig,
    alpha: f64,
    rng: &mut Rng,
) -> MixBatch {
    let n = features.len();
    assert!(n >= 2, "mixup batch needs at least two sources");
    assert_eq!(labels.len(), n);
    let views: Vec<Vec<f64>> = features.iter().map(|x| augment(x, cfg, rng)).collect();
    let partner = derangement(n, rng);
    let mut inputs = Matrix::zeros(n, features[0].len());
    let mut mixed_labels = Vec::with_capacity(n);
    let mut source_a = Vec::with_capacity(n);
    let mut source_b = Vec::with_capacity(n);
    for i in 0..n {
        let lambda = sample_lambda(alpha, rng);
        let mixed = mixup_pair(&views[i], &views[partner[i]], lambda).expect("equal view dims");
        inputs.row_mut(i).copy_from_slice(&mixed);
        mixed_labels.push(MixedLabel::new(labels[i], labels[partner[i]], lambda));
        source_a.push(i);
        source_b.push(partner[i]);
    }
    MixBatch {
        inputs,
        labels: mixed_labels,
        view_pairing: Vec::new(),
        source_a,
        source_b,
    }
}

/// Writes the dataset in the documented text format.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "moitdata v1, {}, {}, {}\n",
        dataset.len(),
        dataset.dim(),
        dataset.classes
    ));
    for i in 0..dataset.len() {
        for v in dataset.features.row(i) {
            // 17 significant digits: enough for a bit-exact f64 round trip.
            out.push_str(&format!("{:.16e},", v));
        }
        out.push_str(&format!("{},{}\n", dataset.labels[i], dataset.clean_labels[i]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. All samples load tagged as
/// train; callers assign splits afterwards.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    let rest = header
        .strip_prefix("moitdata v1,")
        .ok_or_else(|| Error::Parse(format!("bad dataset header '{header}'")))?;
    let dims: Vec<usize> = rest
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("bad dataset header '{header}'")))?;
    if dims.len() != 3 {
        return Err(Error::Parse(format!("bad dataset header '{header}'")));
    }
    let (n, dim, classes) = (dims[0], dims[1], dims[2]);
    if dim == 0 || classes == 0 {
        return Err(Error::Parse("dataset dims must be positive".into()));
    }

    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut clean_labels = Vec::with_capacity(n);
    let mut row = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(Error::Parse(format!("more than {n} data rows")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                dim + 2,
                fields.len()
            )));
        }
        for (j, f) in fields[..dim].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad float '{f}'", lineno + 2)))?;
            features.set(row, j, v);
        }
        let y: usize = fields[dim]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label", lineno + 2)))?;
        let yc: usize = fields[dim + 1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad clean label", lineno + 2)))?;
        if y >= classes || yc >= classes {
            return Err(Error::Parse(format!("line {}: label out of range", lineno + 2)));
        }
        labels.push(y);
        clean_labels.push(yc);
        row += 1;
    }
    if row != n {
        return Err(Error::Parse(format!("expected {n} rows, got {row}")));
    }
    Ok(Dataset {
        features,
        labels,
        clean_labels,
        classes,
        split: vec![Split::Train; n],
    })
}
