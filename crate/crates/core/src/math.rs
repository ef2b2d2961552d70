//! Dense f64 kernels shared by every other module.
//!
//! All training math runs in 64-bit floats; at this scale speed is a
//! non-issue and the gradient checks need the precision.

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += scale * v`.
#[inline]
pub fn axpy(out: &mut [f64], v: &[f64], scale: f64) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v) {
        *o += scale * x;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = norm2(v);
    if norm <= 1e-12 {
        return Err(Error::NearZeroNorm { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Temperature-scaled softmax with max-subtraction for stability.
///
/// Entries land in (0, 1] and sum to 1; `tau` must be positive.
pub fn scaled_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(!logits.is_empty(), "softmax of empty vector");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// All pairwise inner products between the rows of `a` and `b`.
///
/// For unit rows the entries are cosine similarities.
pub fn pairwise_inner(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            context: "pairwise_inner",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let orow = out.row_mut(i);
        for (j, v) in orow.iter_mut().enumerate() {
            *v = dot(ra, b.row(j));
        }
    }
    Ok(out)
}

/// Index of the largest entry, ties broken by the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One-hot probability vector.
pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// Splits `0..n` into `threads` contiguous ranges and maps each on its own
/// thread, concatenating results in range order. With `threads <= 1` the
/// closure runs inline. Reduction order is fixed, so results are identical
/// regardless of thread count.
pub fn parallel_chunks<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Vec<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return f(0..n);
    }
    let threads = threads.min(n);
    let chunk = n.div_ceil(threads);
    let mut parts: Vec<Vec<T>> = Vec::with_capacity(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let lo = t * chunk;
                let hi = ((t + 1) * chunk).min(n);
                let f = &f;
                scope.spawn(move || f(lo..hi))
            })
            .collect();
        for h in handles {
            parts.push(h.join().expect("worker thread panicked"));
        }
    });
    parts.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_already_unit() {
        let out = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_degenerate() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn softmax_equal_logits() {
        let out = scaled_softmax(&[0.0, 0.0], 0.1);
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_tau_one() {
        // e/(e+1) and 1/(e+1)
        let e = std::f64::consts::E;
        let out = scaled_softmax(&[1.0, 0.0], 1.0);
        assert!((out[0] - e / (e + 1.0)).abs() < 1e-5);
        assert!((out[0] - 0.73106).abs() < 1e-5);
        assert!((out[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_sharp_temperature() {
        // 1/(1+e^-10)
        let out = scaled_softmax(&[1.0, 0.0], 0.1);
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((out[0] - expect).abs() < 1e-12);
        assert!((out[0] - 0.9999546).abs() < 1e-7);
        assert!((out[1] - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn pairwise_identity_rows() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = pairwise_inner(&eye, &eye).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pairwise_direct_dot() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![0.6, 0.8]]);
        let out = pairwise_inner(&a, &b).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pairwise_dim_mismatch() {
        let a = Matrix::zeros(1, 2);
        let b = Matrix::zeros(1, 3);
        assert!(matches!(
            pairwise_inner(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn pairwise_matches_naive_loop() {
        let mut rng = crate::rng::Rng::new(31);
        let rows_a: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let out = pairwise_inner(&Matrix::from_rows(&rows_a), &Matrix::from_rows(&rows_b)).unwrap();
        for (i, ra) in rows_a.iter().enumerate() {
            for (j, rb) in rows_b.iter().enumerate() {
                let mut expect = 0.0;
                for k in 0..5 {
                    expect += ra[k] * rb[k];
                }
                assert!((out.get(i, j) - expect).abs() < 1e-12);
                assert!(out.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn parallel_chunks_matches_serial() {
        let serial = parallel_chunks(13, 1, |r| r.map(|i| i * i).collect::<Vec<_>>());
        let par = parallel_chunks(13, 4, |r| r.map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(serial, par);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-1e4f64..1e4, 1..12), tau in 0.05f64..2.0) {
            let out = scaled_softmax(&logits, tau);
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            // Entries are probabilities; extreme logit gaps underflow to
            // exactly 0, which downstream log users clamp.
            prop_assert!(out.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!(out.iter().any(|&p| p > 0.0));
        }

        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 2..8)) {
            prop_assume!(norm2(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((norm2(&once) - 1.0).abs() < 1e-12);
        }
    }
}
