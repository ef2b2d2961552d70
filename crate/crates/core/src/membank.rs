//! Fixed-capacity FIFO memory of past projected embeddings.
//!
//! Enlarges the contrastive positive/negative pool beyond the minibatch.
//! Stored rows are detached copies: losses treat them as constants and no
//! gradient ever flows back into the bank.

use crate::math::Matrix;

#[derive(Debug, Clone)]
struct Entry {
    embedding: Vec<f64>,
    dominant: usize,
    insert_step: u64,
}

/// Ring buffer of the last `capacity` unit embeddings with their dominant
/// labels. Eviction is strictly oldest-first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: std::collections::VecDeque<Entry>,
    next_step: u64,
}

/// Immutable copy of the bank contents, safe to read from any thread.
#[derive(Debug, Clone)]
pub struct MemorySnapshot {
    pub embeddings: Matrix,
    pub dominants: Vec<usize>,
}

impl MemorySnapshot {
    pub fn empty(dim: usize) -> Self {
        MemorySnapshot {
            embeddings: Matrix::zeros(0, dim),
            dominants: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dominants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dominants.is_empty()
    }
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        MemoryBank {
            capacity,
            entries: std::collections::VecDeque::with_capacity(capacity),
            next_step: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends rows in batch order, evicting the oldest entries once the
    /// size would exceed capacity. Rows are expected unit-norm.
    pub fn push_batch(&mut self, rows: &Matrix, dominants: &[usize]) {
        assert_eq!(rows.rows(), dominants.len());
        for (row, &dominant) in rows.iter_rows().zip(dominants) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(Entry {
                embedding: row.to_vec(),
                dominant,
                insert_step: self.next_step,
            });
            self.next_step += 1;
        }
    }

    /// Copies the current contents in age order (oldest first).
    pub fn snapshot(&self) -> MemorySnapshot {
        let dim = self.entries.front().map_or(0, |e| e.embedding.len());
        let mut embeddings = Matrix::zeros(self.entries.len(), dim);
        let mut dominants = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            embeddings.row_mut(i).copy_from_slice(&e.embedding);
            dominants.push(e.dominant);
        }
        MemorySnapshot {
            embeddings,
            dominants,
        }
    }

    /// Insert steps in age order; strictly increasing by construction.
    pub fn insert_steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.insert_step).collect()
    }
}
