//! Label-noise detection: k-NN soft labels, label correction, disagreement
//! scoring, and balanced clean-set selection.
//!
//! Neighbor search is exact (the scale is small enough that approximate
//! indices would be pointless). Similarity is the inner product of unit
//! embeddings; a sample is excluded from its own neighborhood; similarity
//! ties break toward the lower index. Soft labels count neighbor labels per
//! class (equality, so a unanimous neighborhood yields a one-hot row),
//! normalized by k.

use crate::error::{Error, Result};
use crate::math::{argmax, dot, parallel_chunks, Matrix};

/// How the per-class clean-set size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceStrategy {
    /// Per-class size = median of per-class agreement counts.
    #[default]
    Median,
    Min,
    Max,
    /// No balancing: every sample whose corrected label agrees with its
    /// original label is selected.
    Unbalanced,
}

impl std::str::FromStr for BalanceStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(BalanceStrategy::Median),
            "min" => Ok(BalanceStrategy::Min),
            "max" => Ok(BalanceStrategy::Max),
            "none" | "unbalanced" => Ok(BalanceStrategy::Unbalanced),
            other => Err(Error::InvalidConfig(format!("unknown balance strategy '{other}'"))),
        }
    }
}

/// Indices of the `k` rows most similar to row `i` (self excluded), ordered
/// by descending similarity with ties broken by lower index.
fn top_k_neighbors(z: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let zi = z.row(i);
    let mut sims: Vec<(f64, usize)> = (0..z.rows())
        .filter(|&j| j != i)
        .map(|j| (dot(zi, z.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0).expect("similarity is finite").then(a.1.cmp(&b.1))
    };
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, cmp);
        sims.truncate(k);
    }
    sims.sort_unstable_by(cmp);
    sims.into_iter().map(|(_, j)| j).collect()
}

fn knn_vote(z: &Matrix, labels: &[usize], classes: usize, k: usize, threads: usize) -> Result<Matrix> {
    let n = z.rows();
    if k < 2 || k >= n {
        return Err(Error::BadK { k, n });
    }
    assert_eq!(labels.len(), n);
    let rows = parallel_chunks(n, threads, |range| {
        range
            .map(|i| {
                let mut row = vec![0.0; classes];
                for j in top_k_neighbors(z, i, k) {
                    row[labels[j]] += 1.0;
                }
                for v in &mut row {
                    *v /= k as f64;
                }
                row
            })
            .collect::<Vec<_>>()
    });
    Ok(Matrix::from_rows(&rows))
}

/// Per-sample soft labels from a k-NN vote over the original labels.
pub fn knn_soft_labels(z: &Matrix, labels: &[usize], classes: usize, k: usize) -> Result<Matrix> {
    knn_vote(z, labels, classes, k, 1)
}

/// Same vote fanned out over `threads` workers (row-partitioned, so results
/// are identical to the serial path).
pub fn knn_soft_labels_threaded(
    z: &Matrix,
    labels: &[usize],
    classes: usize,
    k: usize,
    threads: usize,
) -> Result<Matrix> {
    knn_vote(z, labels, classes, k, threads)
}

/// Corrected labels: per row, the smallest class index attaining the maximum
/// of the soft-label distribution.
pub fn correct_labels(soft_labels: &Matrix) -> Vec<usize> {
    soft_labels.iter_rows().map(argmax).collect()
}

/// Soft labels recomputed from the neighbors' *corrected* labels.
pub fn corrected_soft_labels(z: &Matrix, corrected: &[usize], classes: usize, k: usize) -> Result<Matrix> {
    knn_vote(z, corrected, classes, k, 1)
}

pub fn corrected_soft_labels_threaded(
    z: &Matrix,
    corrected: &[usize],
    classes: usize,
    k: usize,
    threads: usize,
) -> Result<Matrix> {
    knn_vote(z, corrected, classes, k, threads)
}

/// Cross-entropy between the one-hot original label and a soft-label row,
/// with the probability floored at 1e-12.
pub fn disagreement(soft_row: &[f64], label: usize) -> f64 {
    -soft_row[label].max(1e-12).ln()
}

/// Balanced clean-set selection.
///
/// Per-class agreement counts `a_c = |{i : y_i = c and y_hat_i = y_i}|` set
/// the budget `m` (median / min / max of the counts; the median of an even
/// number of classes is the floored mean of the two middle values). Each
/// class keeps its `min(m, n_c)` lowest-disagreement samples; boundary ties
/// break toward the lower sample index. `gamma[c]` is the largest selected
/// disagreement for class `c` (negative infinity when nothing is selected).
///
/// The unbalanced strategy instead keeps exactly the samples with
/// `y_hat = y`.
pub fn select_clean(
    d: &[f64],
    y_hat: &[usize],
    y: &[usize],
    classes: usize,
    strategy: BalanceStrategy,
) -> (Vec<Vec<usize>>, Vec<f64>) {
    let n = d.len();
    assert_eq!(y_hat.len(), n);
    assert_eq!(y.len(), n);

    let mut clean: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut gamma = vec![f64::NEG_INFINITY; classes];

    if strategy == BalanceStrategy::Unbalanced {
        for i in 0..n {
            if y_hat[i] == y[i] {
                clean[y[i]].push(i);
            }
        }
        for c in 0..classes {
            for &i in &clean[c] {
                if d[i] > gamma[c] {
                    gamma[c] = d[i];
                }
            }
        }
        return (clean, gamma);
    }

    let mut agreements = vec![0usize; classes];
    for i in 0..n {
        if y_hat[i] == y[i] {
            agreements[y[i]] += 1;
        }
    }
    let mut sorted = agreements.clone();
    sorted.sort_unstable();
    let budget = match strategy {
        BalanceStrategy::Median => {
            if classes % 2 == 1 {
                sorted[classes / 2]
            } else {
                // Mean of the two middle counts, floored.
                (sorted[classes / 2 - 1] + sorted[classes / 2]) / 2
            }
        }
        BalanceStrategy::Min => sorted[0],
        BalanceStrategy::Max => sorted[classes - 1],
        BalanceStrategy::Unbalanced => unreachable!(),
    };

    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
        members.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite disagreement").then(a.cmp(&b)));
        members.truncate(budget.min(members.len()));
        if let Some(&last) = members.last() {
            gamma[c] = d[last];
        }
        clean[c] = members;
    }
    (clean, gamma)
}

/// Precision and recall of a selection against the planted-noise mask
/// (`noise_mask[i]` true means the label was flipped, i.e. not truly clean).
/// An empty selection reports (0, 0) and warns.
pub fn detection_metrics(selected: &[bool], noise_mask: &[bool]) -> (f64, f64) {
    assert_eq!(selected.len(), noise_mask.len());
    let selected_count = selected.iter().filter(|&&s| s).count();
    let truly_clean = noise_mask.iter().filter(|&&m| !m).count();
    let hit = selected
        .iter()
        .zip(noise_mask)
        .filter(|&(&s, &m)| s && !m)
        .count();
    if selected_count == 0 {
        eprintln!("warning: empty clean-set selection; precision/recall reported as 0");
        return (0.0, 0.0);
    }
    let precision = hit as f64 / selected_count as f64;
    let recall = if truly_clean == 0 {
        0.0
    } else {
        hit as f64 / truly_clean as f64
    };
    (precision, recall)
}

/// Full detection output for one pass over the training set.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    /// Soft labels from the original-label vote.
    pub soft_labels: Matrix,
    /// Corrected labels (argmax of `soft_labels`).
    pub corrected: Vec<usize>,
    /// Soft labels from the corrected-label vote.
    pub corrected_soft: Matrix,
    /// Per-sample disagreement against the original label.
    pub disagreements: Vec<f64>,
    /// Selected clean indices, per class.
    pub clean_by_class: Vec<Vec<usize>>,
    /// Per-class disagreement thresholds implied by the selection.
    pub gamma: Vec<f64>,
}

impl DetectionResult {
    pub fn clean_size(&self) -> usize {
        self.clean_by_class.iter().map(Vec::len).sum()
    }

    pub fn selected_flags(&self, n: usize) -> Vec<bool> {
        let mut flags = vec![false; n];
        for class in &self.clean_by_class {
            for &i in class {
                flags[i] = true;
            }
        }
        flags
    }

    /// All selected indices in ascending order.
    pub fn clean_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.clean_by_class.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// Runs the whole detection pipeline on unit embeddings and labels.
pub fn run_detection(
    z: &Matrix,
    labels: &[usize],
    classes: usize,
    k: usize,
    strategy: BalanceStrategy,
    threads: usize,
) -> Result<DetectionResult> {
    let soft_labels = knn_soft_labels_threaded(z, labels, classes, k, threads)?;
    let corrected = correct_labels(&soft_labels);
    let corrected_soft = corrected_soft_labels_threaded(z, &corrected, classes, k, threads)?;
    let disagreements: Vec<f64> = corrected_soft
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| disagreement(row, y))
        .collect();
    let (clean_by_class, gamma) = select_clean(&disagreements, &corrected, labels, classes, strategy);
    Ok(DetectionResult {
        soft_labels,
        corrected,
        corrected_soft,
        disagreements,
        clean_by_class,
        gamma,
    })
}

/// Renders the detection CSV: `index,y,y_hat,d,selected,is_noisy_truth`.
pub fn detection_csv(result: &DetectionResult, labels: &[usize], noise_mask: &[bool]) -> String {
    let flags = result.selected_flags(labels.len());
    let mut out = String::from("index,y,y_hat,d,selected,is_noisy_truth\n");
    for i in 0..labels.len() {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            i,
            labels[i],
            result.corrected[i],
            result.disagreements[i],
            flags[i] as u8,
            noise_mask[i] as u8,
        ));
    }
    out
}

/// Reads back the `selected` column of a detection CSV.
pub fn parse_detection_csv_selected(text: &str) -> Result<Vec<bool>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty detection CSV".into()))?;
    if !header.starts_with("index,y,y_hat,d,selected") {
        return Err(Error::Parse(format!("unexpected detection CSV header '{header}'")));
    }
    let mut selected = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(Error::Parse(format!("detection CSV line {}: too few fields", lineno + 2)));
        }
        let idx: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("detection CSV line {}: bad index", lineno + 2)))?;
        if idx != selected.len() {
            return Err(Error::Parse(format!(
                "detection CSV line {}: expected index {}, got {idx}",
                lineno + 2,
                selected.len()
            )));
        }
        match fields[4].trim() {
            "0" => selected.push(false),
            "1" => selected.push(true),
            other => {
                return Err(Error::Parse(format!(
                    "detection CSV line {}: bad selected flag '{other}'",
                    lineno + 2
                )))
            }
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_normalize;
    use crate::rng::Rng;

    /// Brute-force oracle: full stable sort of all similarities with the
    /// same tie rule, then count the first k.
    fn knn_brute(z: &Matrix, labels: &[usize], classes: usize, k: usize) -> Matrix {
        let n = z.rows();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(z.row(i), z.row(j)), j))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut row = vec![0.0; classes];
            for &(_, j) in sims.iter().take(k) {
                row[labels[j]] += 1.0;
            }
            for v in &mut row {
                *v /= k as f64;
            }
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }

    fn circle_points(n: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn unanimous_neighborhood_is_one_hot() {
        // Three tight class-0 points and a far-away class-1 point: with k=2
        // each class-0 point sees only class-0 neighbors.
        let z = Matrix::from_rows(&[
            l2_normalize(&[1.0, 0.01]).unwrap(),
            l2_normalize(&[1.0, 0.0]).unwrap(),
            l2_normalize(&[1.0, -0.01]).unwrap(),
            l2_normalize(&[-1.0, 0.0]).unwrap(),
        ]);
        let p = knn_soft_labels(&z, &[0, 0, 0, 1], 2, 2).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn split_neighborhood_is_half_half() {
        let z = Matrix::from_rows(&[
            l2_normalize(&[1.0, 0.0]).unwrap(),
            l2_normalize(&[1.0, 0.1]).unwrap(),
            l2_normalize(&[1.0, -0.1]).unwrap(),
            l2_normalize(&[-1.0, 0.0]).unwrap(),
        ]);
        let p = knn_soft_labels(&z, &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn circle_matches_exhaustive_oracle() {
        let z = circle_points(12);
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let fast = knn_soft_labels(&z, &labels, 3, 3).unwrap();
        let brute = knn_brute(&z, &labels, 3, 3);
        assert_eq!(fast, brute);
    }

    #[test]
    fn random_instances_match_oracle_exactly() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let n = 10 + rng.below(40);
            let classes = 2 + rng.below(3);
            let k = 2 + rng.below(n / 2);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
                    l2_normalize(&v).unwrap()
                })
                .collect();
            let z = Matrix::from_rows(&rows);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            let fast = knn_soft_labels(&z, &labels, classes, k).unwrap();
            let brute = knn_brute(&z, &labels, classes, k);
            assert_eq!(fast, brute);
            // Rows sum to 1 and are multiples of 1/k.
            for i in 0..n {
                let sum: f64 = fast.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for &v in fast.row(i) {
                    let scaled = v * k as f64;
                    assert!((scaled - scaled.round()).abs() < 1e-9);
                }
            }
            // Threaded path is identical.
            let threaded = knn_soft_labels_threaded(&z, &labels, classes, k, 3).unwrap();
            assert_eq!(fast, threaded);
        }
    }

    #[test]
    fn bad_k_rejected() {
        let z = circle_points(5);
        let labels = vec![0; 5];
        assert!(matches!(knn_soft_labels(&z, &labels, 1, 1), Err(Error::BadK { .. })));
        assert!(matches!(knn_soft_labels(&z, &labels, 1, 5), Err(Error::BadK { .. })));
    }

    #[test]
    fn correct_labels_basics() {
        let p = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.5, 0.5], vec![0.2, 0.8]]);
        assert_eq!(correct_labels(&p), vec![0, 0, 1]);
    }

    #[test]
    fn correct_labels_matches_naive_scan() {
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| crate::math::scaled_softmax(&(0..4).map(|_| rng.gaussian()).collect::<Vec<f64>>(), 1.0))
            .collect();
        let p = Matrix::from_rows(&rows);
        let fast = correct_labels(&p);
        for (i, row) in rows.iter().enumerate() {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(fast[i], best);
        }
    }

    #[test]
    fn corrected_soft_labels_reduction() {
        let z = circle_points(12);
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let direct = knn_soft_labels(&z, &labels, 3, 3).unwrap();
        let via_corrected = corrected_soft_labels(&z, &labels, 3, 3).unwrap();
        assert_eq!(direct, via_corrected);
    }

    #[test]
    fn corrected_all_identical_gives_one_hot() {
        let z = circle_points(8);
        let corrected = vec![2usize; 8];
        let p = corrected_soft_labels(&z, &corrected, 4, 3).unwrap();
        for i in 0..8 {
            assert_eq!(p.row(i), &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn corrected_random_matches_oracle() {
        let mut rng = Rng::new(7);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let z = Matrix::from_rows(&rows);
        let corrected: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
        assert_eq!(
            corrected_soft_labels(&z, &corrected, 4, 5).unwrap(),
            knn_brute(&z, &corrected, 4, 5)
        );
    }

    #[test]
    fn disagreement_values() {
        assert_eq!(disagreement(&[0.0, 1.0], 1), 0.0);
        let clamped = disagreement(&[1.0, 0.0], 1);
        assert!((clamped - 27.631021).abs() < 1e-3);
        assert!((clamped + 1e-12f64.ln()).abs() < 1e-12);
        assert!((disagreement(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn select_clean_median_budget() {
        // a_c = [10, 20, 30] -> median 20; every class has >= 20 members.
        let classes = 3;
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        let mut d = Vec::new();
        let per_class = [(30usize, 10usize), (25, 20), (30, 30)];
        for (c, &(count, agree)) in per_class.iter().enumerate() {
            for i in 0..count {
                y.push(c);
                y_hat.push(if i < agree { c } else { (c + 1) % classes });
                d.push(i as f64);
            }
        }
        let (clean, gamma) = select_clean(&d, &y_hat, &y, classes, BalanceStrategy::Median);
        for c in 0..classes {
            assert_eq!(clean[c].len(), 20, "class {c}");
        }
        assert!(gamma.iter().all(|&g| g.is_finite()));
    }

    #[test]
    fn select_clean_median_even_classes_floors() {
        // Counts [1, 2, 4, 5]: median = floor((2 + 4) / 2) = 3.
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        let mut d = Vec::new();
        for (c, agree) in [(0usize, 1usize), (1, 2), (2, 4), (3, 5)] {
            for i in 0..6 {
                y.push(c);
                y_hat.push(if i < agree { c } else { (c + 1) % 4 });
                d.push(i as f64);
            }
        }
        let (clean, _) = select_clean(&d, &y_hat, &y, 4, BalanceStrategy::Median);
        assert!(clean.iter().all(|c| c.len() == 3));
    }

    #[test]
    fn select_clean_unbalanced_all_agree() {
        let y = vec![0, 1, 2, 0, 1];
        let d = vec![0.1; 5];
        let (clean, _) = select_clean(&d, &y, &y, 3, BalanceStrategy::Unbalanced);
        let total: usize = clean.iter().map(Vec::len).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn select_clean_min_with_zero_count_is_empty() {
        let y = vec![0, 1, 1, 2, 2, 2];
        let y_hat = vec![1, 1, 1, 2, 2, 2]; // class 0 has zero agreements
        let d = vec![0.5; 6];
        let (clean, gamma) = select_clean(&d, &y_hat, &y, 3, BalanceStrategy::Min);
        assert!(clean.iter().all(Vec::is_empty));
        assert!(gamma.iter().all(|&g| g == f64::NEG_INFINITY));
    }

    #[test]
    fn select_clean_monotone_in_disagreement() {
        let mut rng = Rng::new(9);
        let n = 60;
        let y: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let y_hat: Vec<usize> = y
            .iter()
            .map(|&c| if rng.unit() < 0.7 { c } else { (c + 1) % 3 })
            .collect();
        let d: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
        let (clean, _) = select_clean(&d, &y_hat, &y, 3, BalanceStrategy::Median);
        let flags = {
            let mut f = vec![false; n];
            for class in &clean {
                for &i in class {
                    f[i] = true;
                }
            }
            f
        };
        for i in 0..n {
            for j in 0..n {
                if y[i] == y[j] && d[i] < d[j] && flags[j] {
                    assert!(flags[i], "selected {j} but not {i} with smaller d in same class");
                }
            }
        }
    }

    #[test]
    fn metrics_perfect_selection() {
        let noise = vec![false, false, true, false];
        let selected = vec![true, true, false, true];
        assert_eq!(detection_metrics(&selected, &noise), (1.0, 1.0));
    }

    #[test]
    fn metrics_empty_selection() {
        let noise = vec![false, true];
        let selected = vec![false, false];
        assert_eq!(detection_metrics(&selected, &noise), (0.0, 0.0));
    }

    #[test]
    fn metrics_hand_counted_case() {
        // 10 samples, 6 truly clean; select 5 of which 4 clean:
        // precision 4/5 = 0.8, recall 4/6 = 0.6667.
        let noise = vec![false, false, false, false, false, false, true, true, true, true];
        let selected = vec![true, true, true, true, false, false, true, false, false, false];
        let (p, r) = detection_metrics(&selected, &noise);
        assert!((p - 0.8).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn detection_csv_round_trip() {
        let mut rng = Rng::new(21);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let z = Matrix::from_rows(&rows);
        let labels: Vec<usize> = (0..20).map(|_| rng.below(2)).collect();
        let result = run_detection(&z, &labels, 2, 3, BalanceStrategy::Median, 1).unwrap();
        let mask = vec![false; 20];
        let csv = detection_csv(&result, &labels, &mask);
        let parsed = parse_detection_csv_selected(&csv).unwrap();
        assert_eq!(parsed, result.selected_flags(20));
    }
}
